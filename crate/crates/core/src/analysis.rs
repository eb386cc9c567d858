//! Wormhole path statistics of memory access patterns and Jacobian-norm
//! probes of a linear-algebra-explicit memory recurrence.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessModel {
    /// Uniform reads; writes fill sequentially, then follow the read head.
    #[serde(rename = "tardis-uniform")]
    TardisUniform,
    /// Uniform reads and uniform writes.
    #[serde(rename = "uMANN")]
    Umann,
    /// Uniform reads and cyclic sequential writes.
    #[serde(rename = "urMANN")]
    Urmann,
}

impl AccessModel {
    pub const ALL: [AccessModel; 3] = [AccessModel::TardisUniform, AccessModel::Umann, AccessModel::Urmann];

    pub fn name(self) -> &'static str {
        match self {
            AccessModel::TardisUniform => "tardis-uniform",
            AccessModel::Umann => "uMANN",
            AccessModel::Urmann => "urMANN",
        }
    }

    pub fn parse(s: &str) -> Option<AccessModel> {
        AccessModel::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Cell indices read and written at steps `1..=T` (`reads[t-1]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessTrace {
    pub k: usize,
    pub reads: Vec<Option<usize>>,
    pub writes: Vec<Option<usize>>,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.reads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty()
    }
}

/// One simulated episode. The first `k` steps fill the memory
/// sequentially under every model; reads are uniform from step 1.
pub fn simulate_trace<R: Rng + ?Sized>(model: AccessModel, t_len: usize, k: usize, rng: &mut R) -> AccessTrace {
    let mut reads = Vec::with_capacity(t_len);
    let mut writes = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let r = rng.random_range(0..k);
        let w = if t <= k {
            t - 1
        } else {
            match model {
                AccessModel::TardisUniform => r,
                AccessModel::Umann => rng.random_range(0..k),
                AccessModel::Urmann => (t - 1) % k,
            }
        };
        reads.push(Some(r));
        writes.push(Some(w));
    }
    AccessTrace { k, reads, writes }
}

/// Final wormhole-chain length of every cell: writing cell `i` after
/// reading cell `j` sets `len(i) = len(j) + 1`; fill-phase writes set 0.
pub fn chain_lengths(trace: &AccessTrace) -> Vec<u64> {
    let mut len = vec![0u64; trace.k];
    for (ti, (r, w)) in trace.reads.iter().zip(&trace.writes).enumerate() {
        let t = ti + 1;
        if let Some(w) = *w {
            len[w] = if t <= trace.k {
                0
            } else {
                r.map_or(0, |r| len[r] + 1)
            };
        }
    }
    len
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DependencyPath {
    /// Edges on a shortest path from state `t0` to state `t1`.
    pub length: usize,
    /// Fewest recurrence (`t−1 → t`) edges among shortest paths.
    pub outside: usize,
}

/// Shortest path from state `t0` to state `t1` (0 is the initial state)
/// in the graph of recurrence edges `t−1 → t` and wormhole edges from the
/// step that wrote a cell to each later step that read it.
pub fn shortest_dependency_path(trace: &AccessTrace, t0: usize, t1: usize) -> Result<DependencyPath> {
    if t0 >= t1 {
        return Err(Error::invalid("shortest_dependency_path", format!("need t0 < t1, got {t0} >= {t1}")));
    }
    if t1 > trace.len() {
        return Err(Error::invalid("shortest_dependency_path", format!("t1 = {t1} beyond trace length {}", trace.len())));
    }
    // wormhole successors of each state
    let mut holes: Vec<Vec<usize>> = vec![Vec::new(); t1 + 1];
    let mut last_write: Vec<Option<usize>> = vec![None; trace.k];
    for t in 1..=t1 {
        if let Some(r) = trace.reads[t - 1] {
            if let Some(src) = last_write[r] {
                if src + 1 < t {
                    holes[src].push(t);
                }
            }
        }
        if let Some(w) = trace.writes[t - 1] {
            last_write[w] = Some(t);
        }
    }
    let mut dist = vec![usize::MAX; t1 + 1];
    let mut outside = vec![usize::MAX; t1 + 1];
    dist[t0] = 0;
    outside[t0] = 0;
    let mut queue = VecDeque::from([t0]);
    while let Some(u) = queue.pop_front() {
        let next = (u < t1).then_some((u + 1, 1)).into_iter().chain(holes[u].iter().map(|&v| (v, 0)));
        for (v, rec) in next {
            if v > t1 {
                continue;
            }
            let (d, o) = (dist[u] + 1, outside[u] + rec);
            if dist[v] == usize::MAX {
                dist[v] = d;
                outside[v] = o;
                queue.push_back(v);
            } else if dist[v] == d && o < outside[v] {
                outside[v] = o;
            }
        }
    }
    Ok(DependencyPath {
        length: dist[t1],
        outside: outside[t1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub model: AccessModel,
    pub t_len: usize,
    pub k: usize,
    pub seed: u64,
    pub n_sims: usize,
    /// Mean over simulations of the mean final chain length.
    pub mean_len: f64,
    /// Standard deviation of the per-simulation means.
    pub std_len: f64,
    pub t0: Option<usize>,
    pub t1: Option<usize>,
    pub mean_shortest_path: Option<f64>,
    pub mean_outside: Option<f64>,
}

pub fn simulate_paths(
    model: AccessModel,
    t_len: usize,
    k: usize,
    n_sims: usize,
    dependency: Option<(usize, usize)>,
    seed: u64,
) -> Result<PathStats> {
    if t_len == 0 || k == 0 || n_sims == 0 {
        return Err(Error::invalid("simulate_paths", "T, k and n_sims must be positive"));
    }
    if let Some((t0, t1)) = dependency {
        if t0 >= t1 || t1 > t_len {
            return Err(Error::invalid("simulate_paths", format!("bad dependency pair ({t0}, {t1}) for T = {t_len}")));
        }
    }
    let root = SeedStream::new(seed).child("paths").child(model.name());
    let mut means = Vec::with_capacity(n_sims);
    let mut spl = 0.0;
    let mut out = 0.0;
    for s in 0..n_sims {
        let trace = simulate_trace(model, t_len, k, &mut root.indexed("sim", s as u64).rng());
        let lens = chain_lengths(&trace);
        means.push(lens.iter().sum::<u64>() as f64 / k as f64);
        if let Some((t0, t1)) = dependency {
            let p = shortest_dependency_path(&trace, t0, t1)?;
            spl += p.length as f64;
            out += p.outside as f64;
        }
    }
    let n = n_sims as f64;
    let mean = means.iter().sum::<f64>() / n;
    let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PathStats {
        model,
        t_len,
        k,
        seed,
        n_sims,
        mean_len: mean,
        std_len: std,
        t0: dependency.map(|d| d.0),
        t1: dependency.map(|d| d.1),
        mean_shortest_path: dependency.map(|_| spl / n),
        mean_outside: dependency.map(|_| out / n),
    })
}

pub const PATHS_CSV_HEADER: &str = "model,T,k,seed,n_sims,mean_len,std_len,t0,t1,mean_shortest_path,mean_outside";

pub fn paths_csv(rows: &[PathStats]) -> String {
    let mut s = String::from(PATHS_CSV_HEADER);
    s.push('\n');
    let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let u = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.model.name(),
            r.t_len,
            r.k,
            r.seed,
            r.n_sims,
            r.mean_len,
            r.std_len,
            u(r.t0),
            u(r.t1),
            o(r.mean_shortest_path),
            o(r.mean_outside)
        );
    }
    s
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &id in &idx[i..=j] {
                r[id] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Dense row-major square or rectangular matrix for the probes.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows, "probe matmul shapes");
        let mut out = Mat::zeros(self.rows, o.cols);
        crate::autodiff::gemm(self.rows, self.cols, o.cols, &self.data, false, &o.data, false, &mut out.data, 0.0);
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.data[i * self.cols + j] * v[i];
            }
        }
        out
    }

    pub fn scale_rows(&mut self, s: &[f64]) {
        for i in 0..self.rows {
            self.data[i * self.cols..(i + 1) * self.cols].iter_mut().for_each(|v| *v *= s[i]);
        }
    }

    pub fn add(&self, o: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, o: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub const POWER_MAX_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-8;

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let n = m.cols;
    // deterministic, generic start vector
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919 % 13) as f64)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mv = m.matvec(&v);
        let s = norm(&mv);
        let mut w = m.t_matvec(&mv);
        let nw = norm(&w);
        if nw == 0.0 {
            return s;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        let done = (s - sigma).abs() <= POWER_TOL * s.max(f64::MIN_POSITIVE);
        sigma = s;
        if done {
            break;
        }
    }
    norm(&m.matvec(&v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Tanh,
}

/// `h_t = f(W h_{t−1} + U x_t + V r_t)` with `r_t = A h_{s_t}`, where the
/// read policy names the earlier step `s_t` whose state the read cell
/// holds.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub w: Mat,
    pub u: Mat,
    pub v: Mat,
    pub a: Mat,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianProbe {
    pub t0: usize,
    pub t1: usize,
    pub norm_q: f64,
    pub norm_r: f64,
    pub norm_full: f64,
}

impl ProbeModel {
    /// Gaussian weights; `W` rescaled to spectral norm `w_norm`.
    pub fn random<R: Rng + ?Sized>(n: usize, d_x: usize, d_m: usize, w_norm: f64, activation: Activation, rng: &mut R) -> Self {
        let mut gauss = |rows, cols, scale: f64| {
            Mat::from_fn(rows, cols, |_, _| {
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random::<f64>();
                scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
        };
        let w = gauss(n, n, 1.0);
        let w = w.scaled(w_norm / spectral_norm(&w));
        let u = gauss(n, d_x, 1.0 / (d_x as f64).sqrt());
        let v = gauss(n, d_m, 1.0 / (d_m as f64).sqrt());
        let a = gauss(d_m, n, 1.0 / (n as f64).sqrt());
        ProbeModel { w, u, v, a, activation }
    }

    pub fn n(&self) -> usize {
        self.w.rows
    }

    /// `∂h_{t1}/∂h_{t0}` by forward accumulation
    /// `J_t = diag(f′_t)(W J_{t−1} + V A J_{s_t})`, split into the pure
    /// recurrent product `Q` and the memory residual `R = J − Q`.
    ///
    /// `reads[t-1]` is `s_t` for steps `1..=t1`; `inputs[t-1]` is `x_t`;
    /// `h0` is the initial state.
    pub fn jacobian(&self, h0: &[f64], inputs: &[Vec<f64>], reads: &[Option<usize>], t0: usize, t1: usize) -> Result<(Mat, Mat, Mat)> {
        if t0 >= t1 {
            return Err(Error::invalid("jacobian_probe", format!("need t0 < t1, got {t0} >= {t1}")));
        }
        if inputs.len() < t1 || reads.len() < t1 {
            return Err(Error::invalid("jacobian_probe", "inputs or reads shorter than t1"));
        }
        let n = self.n();
        let va = self.v.matmul(&self.a);
        let mut states = vec![h0.to_vec()];
        let mut jac: Vec<Option<Mat>> = vec![None; t1 + 1];
        let mut q = Mat::identity(n);
        for t in 1..=t1 {
            let s = reads[t - 1];
            if let Some(s) = s {
                if s >= t {
                    return Err(Error::invalid("jacobian_probe", format!("step {t} reads future state {s}")));
                }
            }
            let mut z = self.w.matvec(&states[t - 1]);
            for (zi, ui) in z.iter_mut().zip(self.u.matvec(&inputs[t - 1])) {
                *zi += ui;
            }
            if let Some(s) = s {
                for (zi, ri) in z.iter_mut().zip(va.matvec(&states[s])) {
                    *zi += ri;
                }
            }
            let (h, fp): (Vec<f64>, Vec<f64>) = match self.activation {
                Activation::Linear => (z.clone(), vec![1.0; n]),
                Activation::Tanh => z.iter().map(|&v| (v.tanh(), 1.0 - v.tanh().powi(2))).unzip(),
            };
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("probe state at step {t}"),
                });
            }
            states.push(h);
            if t == t0 {
                jac[t] = Some(Mat::identity(n));
            } else if t > t0 {
                let mut j = self.w.matmul(jac[t - 1].as_ref().unwrap());
                if let Some(s) = s.filter(|&s| s >= t0) {
                    j = j.add(&va.matmul(jac[s].as_ref().unwrap()));
                }
                j.scale_rows(&fp);
                let mut wq = self.w.matmul(&q);
                wq.scale_rows(&fp);
                q = wq;
                if !j.all_finite() || !q.all_finite() {
                    return Err(Error::NonFinite {
                        what: format!("probe Jacobian at step {t}"),
                    });
                }
                jac[t] = Some(j);
            }
        }
        let full = jac[t1].take().unwrap();
        let r = full.sub(&q);
        Ok((full, q, r))
    }

    pub fn probe(&self, h0: &[f64], inputs: &[Vec<f64>], reads: &[Option<usize>], t0: usize, t1: usize) -> Result<JacobianProbe> {
        let (full, q, r) = self.jacobian(h0, inputs, reads, t0, t1)?;
        Ok(JacobianProbe {
            t0,
            t1,
            norm_q: spectral_norm(&q),
            norm_r: spectral_norm(&r),
            norm_full: spectral_norm(&full),
        })
    }
}

/// Read policy with a single read of state `t0` at step `t1`.
pub fn oracle_reads(t0: usize, t1: usize) -> Vec<Option<usize>> {
    (1..=t1).map(|t| (t == t1).then_some(t0)).collect()
}

/// Each step reads a uniformly chosen earlier state (none at step 1).
pub fn uniform_reads<R: Rng + ?Sized>(t1: usize, rng: &mut R) -> Vec<Option<usize>> {
    (1..=t1).map(|t| (t > 1).then(|| rng.random_range(1..t))).collect()
}

pub const PROBE_CSV_HEADER: &str = "policy,t0,t1,gap,norm_q,norm_r,norm_full";

pub fn probe_csv(rows: &[(String, JacobianProbe)]) -> String {
    let mut s = String::from(PROBE_CSV_HEADER);
    s.push('\n');
    for (policy, p) in rows {
        let _ = writeln!(s, "{policy},{},{},{},{},{},{}", p.t0, p.t1, p.t1 - p.t0, p.norm_q, p.norm_r, p.norm_full);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadPolicy {
    /// No reads; the plain recurrence.
    Vanilla,
    Oracle,
    Uniform,
}

impl ReadPolicy {
    pub const ALL: [ReadPolicy; 3] = [ReadPolicy::Vanilla, ReadPolicy::Oracle, ReadPolicy::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            ReadPolicy::Vanilla => "vanilla",
            ReadPolicy::Oracle => "oracle",
            ReadPolicy::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<ReadPolicy> {
        ReadPolicy::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Probes `∂h_{t0+gap}/∂h_{t0}` for every gap and policy, from a zero
/// initial state and inputs uniform in `[-1, 1]`.
pub fn probe_gaps(
    model: &ProbeModel,
    t0: usize,
    gaps: &[usize],
    policies: &[ReadPolicy],
    stream: &SeedStream,
) -> Result<Vec<(String, JacobianProbe)>> {
    if t0 == 0 {
        return Err(Error::invalid("probe_gaps", "t0 must be at least 1"));
    }
    let (n, d_x) = (model.n(), model.u.cols);
    let mut rows = Vec::new();
    for &gap in gaps {
        if gap == 0 {
            return Err(Error::invalid("probe_gaps", "gaps must be positive"));
        }
        let t1 = t0 + gap;
        let mut rng = stream.child("inputs").indexed("gap", gap as u64).rng();
        let inputs: Vec<Vec<f64>> = (0..t1).map(|_| (0..d_x).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        for &policy in policies {
            let reads = match policy {
                ReadPolicy::Vanilla => vec![None; t1],
                ReadPolicy::Oracle => oracle_reads(t0, t1),
                ReadPolicy::Uniform => uniform_reads(t1, &mut stream.child("reads").indexed("gap", gap as u64).rng()),
            };
            rows.push((policy.name().to_string(), model.probe(&vec![0.0; n], &inputs, &reads, t0, t1)?));
        }
    }
    Ok(rows)
}
