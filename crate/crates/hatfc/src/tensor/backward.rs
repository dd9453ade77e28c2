//! Reverse traversal of a recorded forward pass.
//!
//! Nodes only reference earlier nodes, so a reverse id sweep visits
//! each node exactly once after all of its consumers. Gradients
//! accumulate straight into per-node buffers; the buffers are taken
//! out of the arena for the duration of one node's VJP so values stay
//! readable without aliasing.

use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{real, Graph, NodeId, Op, Real};

impl<T: Real> Graph<T> {
    pub(crate) fn run_backward(&mut self, from: NodeId) {
        for id in (0..=from).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.backward_node(id);
        }
    }

    fn input_ids(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::MatMulNT { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::SoftmaxRows { a, .. }
            | Op::Silu { a }
            | Op::Softplus { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::BandedSoftmax { a, .. } => vec![*a],
            Op::AddRowVec { a, v, .. } => vec![*a, *v],
            Op::LayerNormRows { a, gain, bias, .. } => vec![*a, *gain, *bias],
            Op::ConcatRows { parts, .. } | Op::ConcatCols { parts, .. } => parts.clone(),
            Op::DecayRow { gamma, .. } => vec![*gamma],
            Op::BandedQk { q, k, pe, gamma, .. } | Op::RowQk { q, k, pe, gamma, .. } => {
                vec![*q, *k, *pe, *gamma]
            }
            Op::BandedAv { a, v, .. } => vec![*a, *v],
            Op::RowAttend { q, k_shared, v_shared, k_self, v_self, pe, gamma, .. } => {
                vec![*q, *k_shared, *v_shared, *k_self, *v_self, *pe, *gamma]
            }
        }
    }

    fn backward_node(&mut self, id: NodeId) {
        let inputs = self.input_ids(id);
        if inputs.is_empty() {
            return;
        }
        // take unique input grad buffers out of the arena
        let mut taken: Vec<(NodeId, Vec<T>)> = Vec::with_capacity(inputs.len());
        for &i in &inputs {
            if taken.iter().any(|(t, _)| *t == i) {
                continue;
            }
            let buf = match self.nodes[i].grad.take() {
                Some(b) => b,
                None => vec![T::zero(); self.nodes[i].value.len()],
            };
            taken.push((i, buf));
        }
        let gout = self.nodes[id].grad.take().expect("output grad present");
        self.vjp_into(id, &gout, &mut taken);
        self.nodes[id].grad = Some(gout);
        for (i, buf) in taken {
            self.nodes[i].grad = Some(buf);
        }
    }

    fn val(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    /// Accumulate this node's vector-Jacobian products into the taken
    /// input gradient buffers.
    fn vjp_into(&self, id: NodeId, g: &[T], taken: &mut [(NodeId, Vec<T>)]) {
        fn buf<'a, T>(taken: &'a mut [(NodeId, Vec<T>)], id: NodeId) -> &'a mut [T] {
            &mut taken
                .iter_mut()
                .find(|(t, _)| *t == id)
                .expect("input buffer taken")
                .1
        }

        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::MatMul { a, b, m, k, n } => {
                // dA += g · Bᵀ, dB += Aᵀ · g
                matmul_nt_acc(g, self.val(*b), *m, *n, *k, buf(taken, *a));
                matmul_tn_acc(self.val(*a), g, *m, *k, *n, buf(taken, *b));
            }

            Op::MatMulNT { a, b, m, k, n } => {
                // out = A·Bᵀ with B n×k: dA += g·B, dB += gᵀ·A
                matmul_acc(g, self.val(*b), *m, *n, *k, buf(taken, *a));
                matmul_tn_acc(g, self.val(*a), *m, *n, *k, buf(taken, *b));
            }

            Op::Add { a, b } => {
                add_assign(buf(taken, *a), g);
                add_assign(buf(taken, *b), g);
            }

            Op::Sub { a, b } => {
                add_assign(buf(taken, *a), g);
                for (x, &gi) in buf(taken, *b).iter_mut().zip(g) {
                    *x = *x - gi;
                }
            }

            Op::Mul { a, b } => {
                mul_add_assign(buf(taken, *a), g, self.val(*b));
                mul_add_assign(buf(taken, *b), g, self.val(*a));
            }

            Op::Scale { a, c } => {
                let c = *c;
                for (x, &gi) in buf(taken, *a).iter_mut().zip(g) {
                    *x = *x + gi * c;
                }
            }

            Op::AddRowVec { a, v, rows, cols } => {
                add_assign(buf(taken, *a), g);
                let dv = buf(taken, *v);
                for r in 0..*rows {
                    for c in 0..*cols {
                        dv[c] = dv[c] + g[r * cols + c];
                    }
                }
            }

            Op::Sum { a } => {
                let g0 = g[0];
                for x in buf(taken, *a).iter_mut() {
                    *x = *x + g0;
                }
            }

            Op::SoftmaxRows { a, rows, cols } => {
                let out = self.val(id);
                let da = buf(taken, *a);
                for r in 0..*rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner: T = o.iter().zip(gr).map(|(&oi, &gi)| oi * gi).sum();
                    for c in 0..*cols {
                        da[r * cols + c] = da[r * cols + c] + o[c] * (gr[c] - inner);
                    }
                }
            }

            Op::LayerNormRows { a, gain, bias, rows, cols } => {
                let n = real::<T>(*cols as f64);
                let eps = real::<T>(1e-5);
                let x = self.val(*a);
                let gv = self.val(*gain);
                {
                    let dgain = buf(taken, *gain);
                    for r in 0..*rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().copied().sum::<T>() / n;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                        let inv = T::one() / (var + eps).sqrt();
                        for c in 0..*cols {
                            let xhat = (row[c] - mean) * inv;
                            dgain[c] = dgain[c] + gr[c] * xhat;
                        }
                    }
                }
                {
                    let dbias = buf(taken, *bias);
                    for r in 0..*rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            dbias[c] = dbias[c] + gr[c];
                        }
                    }
                }
                let da = buf(taken, *a);
                for r in 0..*rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<T>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + eps).sqrt();
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gr[c] * gv[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gr[c] * gv[c];
                        da[r * cols + c] = da[r * cols + c]
                            + inv * (dxhat - sum_dxhat / n - xhat * (sum_dxhat_xhat / n));
                    }
                }
            }

            Op::Silu { a } => {
                let x = self.val(*a);
                let da = buf(taken, *a);
                for i in 0..g.len() {
                    let s = kernels::sigmoid(x[i]);
                    da[i] = da[i] + g[i] * s * (T::one() + x[i] * (T::one() - s));
                }
            }

            Op::Softplus { a } => {
                let x = self.val(*a);
                let da = buf(taken, *a);
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * kernels::sigmoid(x[i]);
                }
            }

            Op::ConcatRows { parts, cols, sizes } => {
                let mut offset = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let len = sizes[idx] * cols;
                    add_assign(buf(taken, p), &g[offset..offset + len]);
                    offset += len;
                }
            }

            Op::SliceRows { a, start, cols } => {
                let da = buf(taken, *a);
                add_assign(&mut da[start * cols..start * cols + g.len()], g);
            }

            Op::SliceCols { a, start, len, rows, src_cols } => {
                let da = buf(taken, *a);
                for r in 0..*rows {
                    for c in 0..*len {
                        da[r * src_cols + start + c] =
                            da[r * src_cols + start + c] + g[r * len + c];
                    }
                }
            }

            Op::ConcatCols { parts, rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let w = widths[idx];
                    let dp = buf(taken, p);
                    for r in 0..*rows {
                        add_assign(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                    offset += w;
                }
            }

            Op::GatherRows { a, indices, cols } => {
                let da = buf(taken, *a);
                for (out_r, &src) in indices.iter().enumerate() {
                    add_assign(
                        &mut da[src * cols..(src + 1) * cols],
                        &g[out_r * cols..(out_r + 1) * cols],
                    );
                }
            }

            Op::DecayRow { gamma, offsets } => {
                let out = self.val(id);
                let mut dg = T::zero();
                for (j, &d) in offsets.iter().enumerate() {
                    dg = dg - g[j] * real::<T>(d as f64) * out[j];
                }
                buf(taken, *gamma)[0] = buf(taken, *gamma)[0] + dg;
            }

            Op::BandedQk { q, k, pe, gamma, t, dk, w_eff } => {
                let qv = self.val(*q);
                let kv = self.val(*k);
                let pv = self.val(*pe);
                let gam = self.val(*gamma)[0];
                let out = self.val(id);
                let inv_sqrt = T::one() / real::<T>(*dk as f64).sqrt();
                let mut dgamma = T::zero();
                // pass 1: dq and dgamma
                {
                    let dq = buf(taken, *q);
                    for tt in 0..*t {
                        let lo = tt.saturating_sub(w_eff - 1);
                        let width = tt - lo + 1;
                        for j in 0..width {
                            let gij = g[tt * w_eff + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let p = lo + j;
                            let delta = tt - p;
                            let tau = (-gam * real::<T>(delta as f64)).exp();
                            dgamma =
                                dgamma - gij * real::<T>(delta as f64) * out[tt * w_eff + j];
                            let ds = gij * tau * inv_sqrt;
                            let krow = &kv[p * dk..(p + 1) * dk];
                            let prow = &pv[delta * dk..(delta + 1) * dk];
                            let dqrow = &mut dq[tt * dk..(tt + 1) * dk];
                            for c in 0..*dk {
                                dqrow[c] = dqrow[c] + ds * (krow[c] + prow[c]);
                            }
                        }
                    }
                }
                // pass 2: dk
                {
                    let dkm = buf(taken, *k);
                    for tt in 0..*t {
                        let lo = tt.saturating_sub(w_eff - 1);
                        let width = tt - lo + 1;
                        let qrow = &qv[tt * dk..(tt + 1) * dk];
                        for j in 0..width {
                            let gij = g[tt * w_eff + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let p = lo + j;
                            let delta = tt - p;
                            let tau = (-gam * real::<T>(delta as f64)).exp();
                            let ds = gij * tau * inv_sqrt;
                            kernels::axpy(ds, qrow, &mut dkm[p * dk..(p + 1) * dk]);
                        }
                    }
                }
                // pass 3: dpe
                {
                    let dpe = buf(taken, *pe);
                    for tt in 0..*t {
                        let lo = tt.saturating_sub(w_eff - 1);
                        let width = tt - lo + 1;
                        let qrow = &qv[tt * dk..(tt + 1) * dk];
                        for j in 0..width {
                            let gij = g[tt * w_eff + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let p = lo + j;
                            let delta = tt - p;
                            let tau = (-gam * real::<T>(delta as f64)).exp();
                            let ds = gij * tau * inv_sqrt;
                            kernels::axpy(ds, qrow, &mut dpe[delta * dk..(delta + 1) * dk]);
                        }
                    }
                }
                buf(taken, *gamma)[0] = buf(taken, *gamma)[0] + dgamma;
            }

            Op::RowQk { q, k, pe, gamma, dk, w } => {
                let qv = self.val(*q);
                let kv = self.val(*k);
                let pv = self.val(*pe);
                let gam = self.val(*gamma)[0];
                let out = self.val(id);
                let inv_sqrt = T::one() / real::<T>(*dk as f64).sqrt();
                let mut dgamma = T::zero();
                {
                    let dq = buf(taken, *q);
                    for j in 0..*w {
                        let gij = g[j];
                        if gij == T::zero() {
                            continue;
                        }
                        let delta = w - 1 - j;
                        let tau = (-gam * real::<T>(delta as f64)).exp();
                        dgamma = dgamma - gij * real::<T>(delta as f64) * out[j];
                        let ds = gij * tau * inv_sqrt;
                        let krow = &kv[j * dk..(j + 1) * dk];
                        let prow = &pv[delta * dk..(delta + 1) * dk];
                        for c in 0..*dk {
                            dq[c] = dq[c] + ds * (krow[c] + prow[c]);
                        }
                    }
                }
                {
                    let dkm = buf(taken, *k);
                    for j in 0..*w {
                        let gij = g[j];
                        if gij == T::zero() {
                            continue;
                        }
                        let delta = w - 1 - j;
                        let tau = (-gam * real::<T>(delta as f64)).exp();
                        let ds = gij * tau * inv_sqrt;
                        kernels::axpy(ds, qv, &mut dkm[j * dk..(j + 1) * dk]);
                    }
                }
                {
                    let dpe = buf(taken, *pe);
                    for j in 0..*w {
                        let gij = g[j];
                        if gij == T::zero() {
                            continue;
                        }
                        let delta = w - 1 - j;
                        let tau = (-gam * real::<T>(delta as f64)).exp();
                        let ds = gij * tau * inv_sqrt;
                        kernels::axpy(ds, qv, &mut dpe[delta * dk..(delta + 1) * dk]);
                    }
                }
                buf(taken, *gamma)[0] = buf(taken, *gamma)[0] + dgamma;
            }

            Op::RowAttend {
                q, k_shared, v_shared, k_self, v_self, pe, gamma, lo, n_shared, dk, dv,
            } => {
                let (lo, n_shared, dk, dv) = (*lo, *n_shared, *dk, *dv);
                let w = n_shared + 1;
                let qv = self.val(*q);
                let ks = self.val(*k_shared);
                let vs = self.val(*v_shared);
                let kself = self.val(*k_self);
                let vself = self.val(*v_self);
                let pv = self.val(*pe);
                let gam = self.val(*gamma)[0];
                let inv_sqrt = T::one() / real::<T>(dk as f64).sqrt();

                // recompute logits and weights (not stored in the node)
                let mut logits = vec![T::zero(); w];
                let mut maxv = T::neg_infinity();
                for j in 0..w {
                    let delta = w - 1 - j;
                    let krow = if j < n_shared {
                        &ks[(lo + j) * dk..(lo + j + 1) * dk]
                    } else {
                        kself
                    };
                    let prow = &pv[delta * dk..(delta + 1) * dk];
                    let mut acc = T::zero();
                    for c in 0..dk {
                        acc = acc + qv[c] * (krow[c] + prow[c]);
                    }
                    let tau = (-gam * real::<T>(delta as f64)).exp();
                    logits[j] = acc * tau * inv_sqrt;
                    if logits[j] > maxv {
                        maxv = logits[j];
                    }
                }
                let mut weights = vec![T::zero(); w];
                let mut z = T::zero();
                for j in 0..w {
                    let e = (logits[j] - maxv).exp();
                    weights[j] = e;
                    z = z + e;
                }
                for wj in weights.iter_mut() {
                    *wj = *wj / z;
                }

                // softmax VJP over the attention weights
                let mut da = vec![T::zero(); w];
                for j in 0..w {
                    let vrow = if j < n_shared {
                        &vs[(lo + j) * dv..(lo + j + 1) * dv]
                    } else {
                        vself
                    };
                    da[j] = kernels::dot(g, vrow);
                }
                let inner: T = weights.iter().zip(&da).map(|(&a, &d)| a * d).sum();
                let mut ds = vec![T::zero(); w];
                let mut dgamma = T::zero();
                for j in 0..w {
                    let delta = w - 1 - j;
                    let dl = weights[j] * (da[j] - inner);
                    let tau = (-gam * real::<T>(delta as f64)).exp();
                    ds[j] = dl * tau * inv_sqrt;
                    dgamma = dgamma - dl * real::<T>(delta as f64) * logits[j];
                }

                {
                    let dq = buf(taken, *q);
                    for j in 0..w {
                        if ds[j] == T::zero() {
                            continue;
                        }
                        let delta = w - 1 - j;
                        let krow = if j < n_shared {
                            &ks[(lo + j) * dk..(lo + j + 1) * dk]
                        } else {
                            kself
                        };
                        let prow = &pv[delta * dk..(delta + 1) * dk];
                        for c in 0..dk {
                            dq[c] = dq[c] + ds[j] * (krow[c] + prow[c]);
                        }
                    }
                }
                {
                    let dks = buf(taken, *k_shared);
                    for j in 0..n_shared {
                        kernels::axpy(ds[j], qv, &mut dks[(lo + j) * dk..(lo + j + 1) * dk]);
                    }
                }
                kernels::axpy(ds[w - 1], qv, buf(taken, *k_self));
                {
                    let dpe = buf(taken, *pe);
                    for j in 0..w {
                        let delta = w - 1 - j;
                        kernels::axpy(ds[j], qv, &mut dpe[delta * dk..(delta + 1) * dk]);
                    }
                }
                {
                    let dvs = buf(taken, *v_shared);
                    for j in 0..n_shared {
                        kernels::axpy(weights[j], g, &mut dvs[(lo + j) * dv..(lo + j + 1) * dv]);
                    }
                }
                kernels::axpy(weights[w - 1], g, buf(taken, *v_self));
                buf(taken, *gamma)[0] = buf(taken, *gamma)[0] + dgamma;
            }

            Op::BandedSoftmax { a, t, w_eff } => {
                let out = self.val(id);
                let da = buf(taken, *a);
                for tt in 0..*t {
                    let width = (tt + 1).min(*w_eff);
                    let o = &out[tt * w_eff..tt * w_eff + width];
                    let gr = &g[tt * w_eff..tt * w_eff + width];
                    let inner: T = o.iter().zip(gr).map(|(&oi, &gi)| oi * gi).sum();
                    for j in 0..width {
                        da[tt * w_eff + j] = da[tt * w_eff + j] + o[j] * (gr[j] - inner);
                    }
                }
            }

            Op::BandedAv { a, v, t, w_eff, dv } => {
                let band = self.val(*a);
                let vv = self.val(*v);
                {
                    let dband = buf(taken, *a);
                    for tt in 0..*t {
                        let lo = tt.saturating_sub(w_eff - 1);
                        let width = tt - lo + 1;
                        let gr = &g[tt * dv..(tt + 1) * dv];
                        for j in 0..width {
                            let p = lo + j;
                            dband[tt * w_eff + j] = dband[tt * w_eff + j]
                                + kernels::dot(gr, &vv[p * dv..(p + 1) * dv]);
                        }
                    }
                }
                {
                    let dvm = buf(taken, *v);
                    for tt in 0..*t {
                        let lo = tt.saturating_sub(w_eff - 1);
                        let width = tt - lo + 1;
                        let gr = &g[tt * dv..(tt + 1) * dv];
                        for j in 0..width {
                            let p = lo + j;
                            kernels::axpy(band[tt * w_eff + j], gr, &mut dvm[p * dv..(p + 1) * dv]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_assign<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[inline]
fn mul_add_assign<T: Real>(acc: &mut [T], g: &[T], other: &[T]) {
    for i in 0..acc.len() {
        acc[i] = acc[i] + g[i] * other[i];
    }
}
