//! Selective state-space recurrence.
//!
//! For every channel `n` and state `s`:
//!
//! ```text
//! ā[t] = exp(Δ[t,n] · A[n,s])
//! h[t] = ā[t] · h[t-1] + Δ[t,n] · B[t,s] · u[t,n],   h[-1] = 0
//! y[t,n] = Σ_s C[t,s] · h[t] + D[n] · u[t,n]
//! ```
//!
//! Inputs are token-major: `u`, `Δ` are `[L, N]`, `B`, `C` are `[L, S]`,
//! `A` is `[N, S]` and `D` is `[N]`.

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Op, Tape, Var};
use crate::tensor::value::Tensor;

/// Which forward kernel evaluates the recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// One step at a time; the reference.
    Sequential,
    /// Time split into chunks of the given length. Chunks are solved from a
    /// zero state in parallel, then stitched with the carried state.
    Chunked(usize),
}

impl ScanMode {
    /// `0` selects the sequential kernel.
    pub fn from_chunk(chunk: usize) -> Self {
        if chunk == 0 {
            ScanMode::Sequential
        } else {
            ScanMode::Chunked(chunk)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
    pub len: usize,
    pub channels: usize,
    pub states: usize,
}

#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    /// `[L, N]`
    pub y: Vec<T>,
    /// Hidden states `[L, N, S]`.
    pub h: Vec<T>,
}

impl<T: Scalar> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let (l, n, s) = (self.len, self.channels, self.states);
        let checks = [
            ("u", self.u.len(), l * n),
            ("delta", self.delta.len(), l * n),
            ("A", self.a.len(), n * s),
            ("B", self.b.len(), l * s),
            ("C", self.c.len(), l * s),
            ("D", self.d.len(), n),
        ];
        if l == 0 {
            return Err(dim_err!("selective scan needs at least one step"));
        }
        for (name, got, want) in checks {
            if got != want {
                return Err(dim_err!("selective scan: {name} has {got} values, expected {want}"));
            }
        }
        Ok(())
    }

    #[inline]
    fn abar(&self, t: usize, n: usize, s: usize) -> Result<T> {
        let v = (self.delta[t * self.channels + n] * self.a[n * self.states + s]).exp();
        // exp(Δ·A) lies in (0, 1) for Δ > 0, A < 0; round-off closes the interval.
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::Numeric(format!(
                "discretized decay {v} outside [0, 1] at step {t}, channel {n}, state {s}"
            )));
        }
        Ok(v)
    }

    fn readout(&self, h: &[T], y: &mut [T]) {
        let (n_ch, ns) = (self.channels, self.states);
        for t in 0..self.len {
            let crow = &self.c[t * ns..(t + 1) * ns];
            for n in 0..n_ch {
                let hs = &h[(t * n_ch + n) * ns..(t * n_ch + n + 1) * ns];
                let dot: T = crow.iter().zip(hs).map(|(&c, &h)| c * h).sum();
                y[t * n_ch + n] = dot + self.d[n] * self.u[t * n_ch + n];
            }
        }
    }

    fn check_states(&self, h: &[T]) -> Result<()> {
        let per_step = self.channels * self.states;
        if let Some(pos) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "selective scan state became non-finite at step {}",
                pos / per_step
            )));
        }
        Ok(())
    }
}

/// Step-by-step reference recurrence.
pub fn scan_sequential<T: Scalar>(inp: &ScanInputs<'_, T>) -> Result<ScanOutput<T>> {
    inp.validate()?;
    let (l, n_ch, ns) = (inp.len, inp.channels, inp.states);
    let mut h = vec![T::zero(); l * n_ch * ns];
    for t in 0..l {
        for n in 0..n_ch {
            let du = inp.delta[t * n_ch + n] * inp.u[t * n_ch + n];
            for s in 0..ns {
                let prev = if t == 0 { T::zero() } else { h[((t - 1) * n_ch + n) * ns + s] };
                h[(t * n_ch + n) * ns + s] = inp.abar(t, n, s)? * prev + du * inp.b[t * ns + s];
            }
        }
    }
    inp.check_states(&h)?;
    let mut y = vec![T::zero(); l * n_ch];
    inp.readout(&h, &mut y);
    Ok(ScanOutput { y, h })
}

/// Chunked variant: identical results up to round-off.
pub fn scan_chunked<T: Scalar>(inp: &ScanInputs<'_, T>, chunk: usize) -> Result<ScanOutput<T>> {
    inp.validate()?;
    let chunk = chunk.max(1);
    let (l, n_ch, ns) = (inp.len, inp.channels, inp.states);
    let per_step = n_ch * ns;
    let mut h = vec![T::zero(); l * per_step];
    // Cumulative decay since the chunk start, same layout as `h`.
    let mut decay = vec![T::zero(); l * per_step];

    h.par_chunks_mut(chunk * per_step)
        .zip(decay.par_chunks_mut(chunk * per_step))
        .enumerate()
        .try_for_each(|(ci, (hc, pc))| -> Result<()> {
            let t0 = ci * chunk;
            for (k, t) in (t0..t0 + hc.len() / per_step).enumerate() {
                for n in 0..n_ch {
                    let du = inp.delta[t * n_ch + n] * inp.u[t * n_ch + n];
                    for s in 0..ns {
                        let i = k * per_step + n * ns + s;
                        let ab = inp.abar(t, n, s)?;
                        let (hp, pp) = if k == 0 {
                            (T::zero(), T::one())
                        } else {
                            (hc[i - per_step], pc[i - per_step])
                        };
                        hc[i] = ab * hp + du * inp.b[t * ns + s];
                        pc[i] = ab * pp;
                    }
                }
            }
            Ok(())
        })?;

    let n_chunks = l.div_ceil(chunk);
    let mut carries = vec![vec![T::zero(); per_step]; n_chunks];
    for ci in 1..n_chunks {
        let last = (ci * chunk - 1) * per_step;
        let next: Vec<T> = (0..per_step)
            .map(|j| h[last + j] + decay[last + j] * carries[ci - 1][j])
            .collect();
        carries[ci] = next;
    }

    h.par_chunks_mut(chunk * per_step)
        .zip(decay.par_chunks(chunk * per_step))
        .zip(carries.par_iter())
        .skip(1)
        .for_each(|((hc, pc), carry)| {
            for (i, (hv, &pv)) in hc.iter_mut().zip(pc).enumerate() {
                *hv += pv * carry[i % per_step];
            }
        });

    inp.check_states(&h)?;
    let mut y = vec![T::zero(); l * n_ch];
    inp.readout(&h, &mut y);
    Ok(ScanOutput { y, h })
}

pub fn run_scan<T: Scalar>(inp: &ScanInputs<'_, T>, mode: ScanMode) -> Result<ScanOutput<T>> {
    match mode {
        ScanMode::Sequential => scan_sequential(inp),
        ScanMode::Chunked(c) => scan_chunked(inp, c),
    }
}

#[derive(Debug)]
pub(crate) struct ScanRecord<T> {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    states: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Records the selective scan. Shapes: `u`, `delta` `[L, N]`; `a` `[N, S]`;
    /// `b`, `c` `[L, S]`; `d` `[N]`. Returns `y` as `[L, N]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 {
            return Err(dim_err!("selective scan input must be [L, N], got {us:?}"));
        }
        let (l, n) = (us[0], us[1]);
        let s = *self.shape(a).get(1).unwrap_or(&0);
        let expect: [(Var, Vec<usize>, &str); 5] = [
            (delta, vec![l, n], "delta"),
            (a, vec![n, s], "A"),
            (b, vec![l, s], "B"),
            (c, vec![l, s], "C"),
            (d, vec![n], "D"),
        ];
        for (v, shape, name) in &expect {
            if self.shape(*v) != shape.as_slice() {
                return Err(dim_err!("selective scan: {name} is {:?}, expected {shape:?}", self.shape(*v)));
            }
        }
        let out = {
            let (uv, dv, av) = (self.value(u).values(), self.value(delta).values(), self.value(a).values());
            let (bv, cv, skip) = (self.value(b).values(), self.value(c).values(), self.value(d).values());
            let inp = ScanInputs { u: &uv, delta: &dv, a: &av, b: &bv, c: &cv, d: &skip, len: l, channels: n, states: s };
            run_scan(&inp, mode)?
        };
        let record = ScanRecord { u, delta, a, b, c, d, states: out.h };
        self.push(
            Tensor::from_parts(vec![l, n], out.y),
            Op::Scan(Box::new(record)),
            &[u, delta, a, b, c, d],
            "selective_scan",
        )
    }
}

pub(crate) fn scan_backward<T: Scalar>(tape: &Tape<T>, rec: &ScanRecord<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
    let us = tape.shape(rec.u);
    let (l, n_ch) = (us[0], us[1]);
    let ns = tape.shape(rec.a)[1];
    let u = tape.value(rec.u).values();
    let delta = tape.value(rec.delta).values();
    let a = tape.value(rec.a).values();
    let b = tape.value(rec.b).values();
    let c = tape.value(rec.c).values();
    let d = tape.value(rec.d).values();
    let h = &rec.states;

    let mut gu = vec![T::zero(); l * n_ch];
    let mut gdelta = vec![T::zero(); l * n_ch];
    let mut ga = vec![T::zero(); n_ch * ns];
    let mut gb = vec![T::zero(); l * ns];
    let mut gc = vec![T::zero(); l * ns];
    let mut gd = vec![T::zero(); n_ch];
    // Adjoint of h[t] flowing back from step t+1.
    let mut carry = vec![T::zero(); n_ch * ns];

    for t in (0..l).rev() {
        for n in 0..n_ch {
            let ti = t * n_ch + n;
            let (gy, uu, dt) = (g[ti], u[ti], delta[ti]);
            gd[n] += gy * uu;
            let mut gu_acc = gy * d[n];
            let mut gdt = T::zero();
            for s in 0..ns {
                let hi = ti * ns + s;
                let gh = carry[n * ns + s] + gy * c[t * ns + s];
                gc[t * ns + s] += gy * h[hi];
                let av = a[n * ns + s];
                let ab = (dt * av).exp();
                let hprev = if t == 0 { T::zero() } else { h[hi - n_ch * ns] };
                let g_ab = gh * hprev * ab;
                gdt += g_ab * av;
                ga[n * ns + s] += g_ab * dt;
                let g_bbar = gh * uu;
                let bv = b[t * ns + s];
                gdt += g_bbar * bv;
                gb[t * ns + s] += g_bbar * dt;
                gu_acc += gh * dt * bv;
                carry[n * ns + s] = gh * ab;
            }
            gu[ti] = gu_acc;
            gdelta[ti] = gdt;
        }
    }
    if let Some(pos) = gu.iter().chain(&gdelta).position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "selective scan gradient became non-finite at step {}",
            (pos % (l * n_ch)) / n_ch
        )));
    }
    Ok(vec![
        (rec.u, gu),
        (rec.delta, gdelta),
        (rec.a, ga),
        (rec.b, gb),
        (rec.c, gc),
        (rec.d, gd),
    ])
}
