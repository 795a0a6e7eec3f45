//! Selective state-space scan kernels.
//!
//! Recurrence per batch `b`, channel `d`, state `n`:
//!
//! ```text
//! h[t] = exp(Δ[t,d]·A[d,n]) · h[t-1] + Δ[t,d]·B[t,n]·u[t,d],   h[-1] = 0
//! y[t,d] = Σₙ C[t,n] · h[t]
//! ```
//!
//! Layouts: `u, Δ: [B, T, D]`, `A: [D, N]`, `B, C: [B, T, N]`, states `[B, T, D, N]`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    fn seq(&self) -> usize {
        self.batch * self.len * self.channels
    }

    fn bc(&self) -> usize {
        self.batch * self.len * self.state
    }
}

pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
}

impl<T> ScanInputs<'_, T> {
    fn check(&self, dims: &ScanDims) {
        assert_eq!(self.u.len(), dims.seq());
        assert_eq!(self.delta.len(), dims.seq());
        assert_eq!(self.a.len(), dims.channels * dims.state);
        assert_eq!(self.b.len(), dims.bc());
        assert_eq!(self.c.len(), dims.bc());
    }
}

/// Saved forward quantities needed by [`scan_backward`], both `[B, T, D, N]`.
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    pub states: Vec<T>,
    pub abar: Vec<T>,
}

/// Reference sequential recurrence. Returns `(y, states)`.
pub fn scan_sequential<T: Scalar>(x: &ScanInputs<'_, T>, dims: ScanDims) -> (Vec<T>, Vec<T>) {
    let (y, trace) = scan_traced(x, dims);
    (y, trace.states)
}

/// Sequential recurrence that also keeps the discretized decays for the backward pass.
pub fn scan_traced<T: Scalar>(x: &ScanInputs<'_, T>, dims: ScanDims) -> (Vec<T>, ScanTrace<T>) {
    x.check(&dims);
    let ScanDims { batch, len, channels: d_n, state: n_n } = dims;
    let lanes = d_n * n_n;
    let mut y = vec![T::zero(); dims.seq()];
    let mut states = vec![T::zero(); batch * len * lanes];
    let mut abar = vec![T::zero(); batch * len * lanes];
    let zero = vec![T::zero(); lanes];
    for b in 0..batch {
        for t in 0..len {
            let row = b * len + t;
            let b_t = &x.b[row * n_n..(row + 1) * n_n];
            let c_t = &x.c[row * n_n..(row + 1) * n_n];
            let (done, rest) = states.split_at_mut(row * lanes);
            let prev = if t == 0 { &zero[..] } else { &done[(row - 1) * lanes..] };
            let h = &mut rest[..lanes];
            let ab = &mut abar[row * lanes..(row + 1) * lanes];
            for d in 0..d_n {
                let dt = x.delta[row * d_n + d];
                let du = dt * x.u[row * d_n + d];
                let r = d * n_n..(d + 1) * n_n;
                let (a_d, p_d, h_d, ab_d) = (&x.a[r.clone()], &prev[r.clone()], &mut h[r.clone()], &mut ab[r]);
                let mut acc = T::zero();
                for n in 0..n_n {
                    let e = (dt * a_d[n]).exp();
                    let hv = e * p_d[n] + du * b_t[n];
                    ab_d[n] = e;
                    h_d[n] = hv;
                    acc += c_t[n] * hv;
                }
                y[row * d_n + d] = acc;
            }
        }
    }
    (y, ScanTrace { states, abar })
}

/// Two-pass blocked scan. Each chunk is first scanned from a zero state while
/// tracking the cumulative decay; chunk carries are then propagated and folded
/// back in. Uses the associativity of `(a₁,x₁)∘(a₂,x₂) = (a₁a₂, a₂x₁ + x₂)`, so
/// the arithmetic order differs from [`scan_sequential`].
pub fn scan_chunked<T: Scalar>(x: &ScanInputs<'_, T>, dims: ScanDims, chunk: usize) -> Vec<T> {
    x.check(&dims);
    let chunk = chunk.max(1);
    let ScanDims { batch, len, channels: d_n, state: n_n } = dims;
    let lanes = d_n * n_n;
    let mut y = vec![T::zero(); dims.seq()];
    let n_chunks = len.div_ceil(chunk);
    // local[t] holds the zero-start state, decay[t] the cumulative product inside the chunk.
    let mut local = vec![T::zero(); len * lanes];
    let mut decay = vec![T::zero(); len * lanes];
    for b in 0..batch {
        // Pass 1: independent local scans.
        for ci in 0..n_chunks {
            let (t0, t1) = (ci * chunk, ((ci + 1) * chunk).min(len));
            for t in t0..t1 {
                let row = b * len + t;
                let b_t = &x.b[row * n_n..(row + 1) * n_n];
                for d in 0..d_n {
                    let dt = x.delta[row * d_n + d];
                    let du = dt * x.u[row * d_n + d];
                    for n in 0..n_n {
                        let lane = d * n_n + n;
                        let abar = (dt * x.a[lane]).exp();
                        let (prev_h, prev_p) = if t == t0 {
                            (T::zero(), T::one())
                        } else {
                            (local[(t - 1) * lanes + lane], decay[(t - 1) * lanes + lane])
                        };
                        local[t * lanes + lane] = abar * prev_h + du * b_t[n];
                        decay[t * lanes + lane] = abar * prev_p;
                    }
                }
            }
        }
        // Pass 2: propagate chunk carries and read out.
        let mut carry = vec![T::zero(); lanes];
        for ci in 0..n_chunks {
            let (t0, t1) = (ci * chunk, ((ci + 1) * chunk).min(len));
            for t in t0..t1 {
                let row = b * len + t;
                let c_t = &x.c[row * n_n..(row + 1) * n_n];
                for d in 0..d_n {
                    let mut acc = T::zero();
                    for n in 0..n_n {
                        let lane = d * n_n + n;
                        let h = local[t * lanes + lane] + decay[t * lanes + lane] * carry[lane];
                        acc += c_t[n] * h;
                    }
                    y[row * d_n + d] = acc;
                }
            }
            let last = t1 - 1;
            for lane in 0..lanes {
                carry[lane] = local[last * lanes + lane] + decay[last * lanes + lane] * carry[lane];
            }
        }
    }
    y
}

pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
}

/// Reverse-mode pass of the recurrence given the saved forward trace.
pub fn scan_backward<T: Scalar>(x: &ScanInputs<'_, T>, trace: &ScanTrace<T>, dy: &[T], dims: ScanDims) -> ScanGrads<T> {
    x.check(&dims);
    let ScanDims { batch, len, channels: d_n, state: n_n } = dims;
    let lanes = d_n * n_n;
    let mut g = ScanGrads {
        du: vec![T::zero(); dims.seq()],
        ddelta: vec![T::zero(); dims.seq()],
        da: vec![T::zero(); lanes],
        db: vec![T::zero(); dims.bc()],
        dc: vec![T::zero(); dims.bc()],
    };
    let zero = vec![T::zero(); lanes];
    // Adjoint of h[t] flowing in from step t+1 (already multiplied by Ā[t+1]).
    let mut carry = vec![T::zero(); lanes];
    for b in 0..batch {
        carry.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let row = b * len + t;
            let h_t = &trace.states[row * lanes..(row + 1) * lanes];
            let ab_t = &trace.abar[row * lanes..(row + 1) * lanes];
            let h_prev = if t == 0 { &zero[..] } else { &trace.states[(row - 1) * lanes..row * lanes] };
            let b_t = &x.b[row * n_n..(row + 1) * n_n];
            let c_t = &x.c[row * n_n..(row + 1) * n_n];
            let db_t = &mut g.db[row * n_n..(row + 1) * n_n];
            let dc_t = &mut g.dc[row * n_n..(row + 1) * n_n];
            for d in 0..d_n {
                let dy_v = dy[row * d_n + d];
                let dt = x.delta[row * d_n + d];
                let u = x.u[row * d_n + d];
                let r = d * n_n..(d + 1) * n_n;
                let (h_d, ab_d, hp_d, a_d) = (&h_t[r.clone()], &ab_t[r.clone()], &h_prev[r.clone()], &x.a[r.clone()]);
                let (carry_d, da_d) = (&mut carry[r.clone()], &mut g.da[r]);
                let dtu = dt * u;
                let mut d_delta = T::zero();
                let mut d_bu = T::zero();
                for n in 0..n_n {
                    dc_t[n] += dy_v * h_d[n];
                    let gh = carry_d[n] + c_t[n] * dy_v;
                    // h = Ā·h_prev + Δ·B·u
                    let d_abar = gh * hp_d[n] * ab_d[n];
                    d_delta += d_abar * a_d[n];
                    da_d[n] += d_abar * dt;
                    db_t[n] += gh * dtu;
                    d_bu += gh * b_t[n];
                    carry_d[n] = gh * ab_d[n];
                }
                g.ddelta[row * d_n + d] += d_delta + d_bu * u;
                g.du[row * d_n + d] += d_bu * dt;
            }
        }
    }
    g
}
