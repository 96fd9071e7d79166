//! Fused single-direction GRU over a whole sequence, with backpropagation
//! through time.
//!
//! Gate layout in the packed weights is `[update | reset | candidate]`:
//! `w: in x 3H`, `u: H x 3H`, `b: 1 x 3H`.
//!
//! ```text
//! z_t = σ(x_t W_z + h_{t-1} U_z + b_z)
//! r_t = σ(x_t W_r + h_{t-1} U_r + b_r)
//! n_t = tanh(x_t W_n + (r_t ∘ h_{t-1}) U_n + b_n)
//! h_t = (1 - z_t) ∘ h_{t-1} + z_t ∘ n_t
//! ```

use super::Scalar;

#[derive(Debug, Clone)]
pub(crate) struct GruCache<F> {
    pub z: Vec<F>,
    pub r: Vec<F>,
    pub n: Vec<F>,
    pub h_prev: Vec<F>,
}

pub(crate) struct GruDims {
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruDims {
    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.steps).rev())
        } else {
            Box::new(0..self.steps)
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) fn forward<F: Scalar>(
    dims: &GruDims,
    x: &[F],
    w: &[F],
    u: &[F],
    b: &[F],
) -> (Vec<F>, GruCache<F>) {
    let hd = dims.hidden;
    let g3 = 3 * hd;
    let len = dims.steps * hd;
    let mut out = vec![F::zero(); len];
    let mut cache = GruCache {
        z: vec![F::zero(); len],
        r: vec![F::zero(); len],
        n: vec![F::zero(); len],
        h_prev: vec![F::zero(); len],
    };
    let mut h = vec![F::zero(); hd];
    let mut gates = vec![F::zero(); g3];
    let mut rh = vec![F::zero(); hd];

    for t in dims.order() {
        gates.copy_from_slice(b);
        let xt = &x[t * dims.input..(t + 1) * dims.input];
        for (i, &xv) in xt.iter().enumerate() {
            if xv == F::zero() {
                continue;
            }
            let wrow = &w[i * g3..(i + 1) * g3];
            for (g, &wv) in gates.iter_mut().zip(wrow) {
                *g = *g + xv * wv;
            }
        }
        for (p, &hv) in h.iter().enumerate() {
            if hv == F::zero() {
                continue;
            }
            let urow = &u[p * g3..p * g3 + 2 * hd];
            for (g, &uv) in gates[..2 * hd].iter_mut().zip(urow) {
                *g = *g + hv * uv;
            }
        }
        let base = t * hd;
        for j in 0..hd {
            let z = sigmoid(gates[j]);
            let r = sigmoid(gates[hd + j]);
            cache.z[base + j] = z;
            cache.r[base + j] = r;
            cache.h_prev[base + j] = h[j];
            rh[j] = r * h[j];
        }
        for (p, &rv) in rh.iter().enumerate() {
            if rv == F::zero() {
                continue;
            }
            let urow = &u[p * g3 + 2 * hd..(p + 1) * g3];
            for (g, &uv) in gates[2 * hd..].iter_mut().zip(urow) {
                *g = *g + rv * uv;
            }
        }
        for j in 0..hd {
            let n = gates[2 * hd + j].tanh();
            let z = cache.z[base + j];
            cache.n[base + j] = n;
            h[j] = (F::one() - z) * h[j] + z * n;
            out[base + j] = h[j];
        }
    }
    (out, cache)
}

pub(crate) struct GruGrads<F> {
    pub dx: Vec<F>,
    pub dw: Vec<F>,
    pub du: Vec<F>,
    pub db: Vec<F>,
}

pub(crate) fn backward<F: Scalar>(
    dims: &GruDims,
    x: &[F],
    w: &[F],
    u: &[F],
    cache: &GruCache<F>,
    dout: &[F],
) -> GruGrads<F> {
    let hd = dims.hidden;
    let g3 = 3 * hd;
    let mut grads = GruGrads {
        dx: vec![F::zero(); dims.steps * dims.input],
        dw: vec![F::zero(); dims.input * g3],
        du: vec![F::zero(); hd * g3],
        db: vec![F::zero(); g3],
    };
    let mut carry = vec![F::zero(); hd];
    let mut dgx = vec![F::zero(); g3];
    let mut dhp = vec![F::zero(); hd];
    let mut drh = vec![F::zero(); hd];

    let order: Vec<usize> = dims.order().collect();
    for &t in order.iter().rev() {
        let base = t * hd;
        let z = &cache.z[base..base + hd];
        let r = &cache.r[base..base + hd];
        let n = &cache.n[base..base + hd];
        let hp = &cache.h_prev[base..base + hd];

        for j in 0..hd {
            let dh = dout[base + j] + carry[j];
            let dn = dh * z[j];
            let dz = dh * (n[j] - hp[j]);
            dhp[j] = dh * (F::one() - z[j]);
            dgx[2 * hd + j] = dn * (F::one() - n[j] * n[j]);
            dgx[j] = dz * z[j] * (F::one() - z[j]);
        }
        // candidate path through U_n
        for p in 0..hd {
            let urow = &u[p * g3 + 2 * hd..(p + 1) * g3];
            let dan = &dgx[2 * hd..];
            let mut acc = F::zero();
            for (&uv, &dv) in urow.iter().zip(dan) {
                acc = acc + uv * dv;
            }
            drh[p] = acc;
            let rh = r[p] * hp[p];
            if rh != F::zero() {
                let durow = &mut grads.du[p * g3 + 2 * hd..(p + 1) * g3];
                for (d, &dv) in durow.iter_mut().zip(dan) {
                    *d = *d + rh * dv;
                }
            }
        }
        for j in 0..hd {
            let dr = drh[j] * hp[j];
            dhp[j] = dhp[j] + drh[j] * r[j];
            dgx[hd + j] = dr * r[j] * (F::one() - r[j]);
        }
        // update/reset paths through U_z, U_r
        for p in 0..hd {
            let urow = &u[p * g3..p * g3 + 2 * hd];
            let dzr = &dgx[..2 * hd];
            let mut acc = F::zero();
            for (&uv, &dv) in urow.iter().zip(dzr) {
                acc = acc + uv * dv;
            }
            dhp[p] = dhp[p] + acc;
            let hv = hp[p];
            if hv != F::zero() {
                let durow = &mut grads.du[p * g3..p * g3 + 2 * hd];
                for (d, &dv) in durow.iter_mut().zip(dzr) {
                    *d = *d + hv * dv;
                }
            }
        }
        for (d, &g) in grads.db.iter_mut().zip(&dgx) {
            *d = *d + g;
        }
        let xt = &x[t * dims.input..(t + 1) * dims.input];
        for (i, &xv) in xt.iter().enumerate() {
            let wrow = &w[i * g3..(i + 1) * g3];
            let mut acc = F::zero();
            for (&wv, &g) in wrow.iter().zip(&dgx) {
                acc = acc + wv * g;
            }
            grads.dx[t * dims.input + i] = acc;
            if xv != F::zero() {
                let dwrow = &mut grads.dw[i * g3..(i + 1) * g3];
                for (d, &g) in dwrow.iter_mut().zip(&dgx) {
                    *d = *d + xv * g;
                }
            }
        }
        carry.copy_from_slice(&dhp);
    }
    grads
}
