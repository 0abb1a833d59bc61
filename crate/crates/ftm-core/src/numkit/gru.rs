//! GRU cell, forward and backward.
//!
//! Gate convention: z is the update gate applied to the candidate state,
//! so h' = (1 - z) .* h + z .* h_cand and a zero update gate keeps the
//! previous state unchanged.

use super::ops::sigmoid;
use super::NumError;

#[derive(Debug, Clone, Copy)]
pub struct GruDims {
    pub input: usize,
    pub hidden: usize,
}

/// Views over the cell's parameter storage. W* are (hidden x input),
/// U* are (hidden x hidden), all row-major.
#[derive(Debug, Clone, Copy)]
pub struct GruParams<'a> {
    pub w_z: &'a [f64],
    pub u_z: &'a [f64],
    pub b_z: &'a [f64],
    pub w_r: &'a [f64],
    pub u_r: &'a [f64],
    pub b_r: &'a [f64],
    pub w_h: &'a [f64],
    pub u_h: &'a [f64],
    pub b_h: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct GruGrads {
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruGrads {
    pub fn zeros(dims: GruDims) -> Self {
        let wi = dims.hidden * dims.input;
        let uh = dims.hidden * dims.hidden;
        Self {
            w_z: vec![0.0; wi],
            u_z: vec![0.0; uh],
            b_z: vec![0.0; dims.hidden],
            w_r: vec![0.0; wi],
            u_r: vec![0.0; uh],
            b_r: vec![0.0; dims.hidden],
            w_h: vec![0.0; wi],
            u_h: vec![0.0; uh],
            b_h: vec![0.0; dims.hidden],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
}

fn check_dims(h: &[f64], x: &[f64], p: &GruParams, dims: GruDims) -> Result<(), NumError> {
    let ok = h.len() == dims.hidden
        && x.len() == dims.input
        && p.w_z.len() == dims.hidden * dims.input
        && p.u_z.len() == dims.hidden * dims.hidden
        && p.b_z.len() == dims.hidden
        && p.w_r.len() == dims.hidden * dims.input
        && p.w_h.len() == dims.hidden * dims.input
        && p.u_r.len() == dims.hidden * dims.hidden
        && p.u_h.len() == dims.hidden * dims.hidden
        && p.b_r.len() == dims.hidden
        && p.b_h.len() == dims.hidden;
    if ok {
        Ok(())
    } else {
        Err(NumError::LengthMismatch {
            op: "gru_step",
            left: h.len(),
            right: x.len(),
        })
    }
}

/// mat (rows x cols) times vec (cols), affine with bias when given.
fn mat_vec(mat: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &mat[i * cols..(i + 1) * cols];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// mat^T (cols) accumulation: out[j] += sum_i mat[i][j] * v[i].
fn mat_t_vec_add(mat: &[f64], v: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        let row = &mat[i * cols..(i + 1) * cols];
        for (o, m) in out.iter_mut().zip(row) {
            *o += vi * m;
        }
    }
}

pub fn gru_step(
    h: &[f64],
    x: &[f64],
    p: &GruParams,
    dims: GruDims,
) -> Result<Vec<f64>, NumError> {
    gru_step_with_cache(h, x, p, dims).map(|(h_next, _)| h_next)
}

pub fn gru_step_with_cache(
    h: &[f64],
    x: &[f64],
    p: &GruParams,
    dims: GruDims,
) -> Result<(Vec<f64>, GruCache), NumError> {
    check_dims(h, x, p, dims)?;
    let (nh, ni) = (dims.hidden, dims.input);

    let mut z = mat_vec(p.w_z, x, nh, ni);
    let zu = mat_vec(p.u_z, h, nh, nh);
    let mut r = mat_vec(p.w_r, x, nh, ni);
    let ru = mat_vec(p.u_r, h, nh, nh);
    for i in 0..nh {
        z[i] = sigmoid(z[i] + zu[i] + p.b_z[i]);
        r[i] = sigmoid(r[i] + ru[i] + p.b_r[i]);
    }
    let rh: Vec<f64> = r.iter().zip(h).map(|(ri, hi)| ri * hi).collect();
    let mut cand = mat_vec(p.w_h, x, nh, ni);
    let cu = mat_vec(p.u_h, &rh, nh, nh);
    for i in 0..nh {
        cand[i] = (cand[i] + cu[i] + p.b_h[i]).tanh();
    }
    let h_next: Vec<f64> = (0..nh)
        .map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i])
        .collect();
    let cache = GruCache {
        x: x.to_vec(),
        h: h.to_vec(),
        z,
        r,
        cand,
    };
    Ok((h_next, cache))
}

/// Backward for one step. Returns (dh, dx) and accumulates parameter
/// gradients into `grads`.
pub fn gru_backward(
    cache: &GruCache,
    p: &GruParams,
    dims: GruDims,
    dh_next: &[f64],
    grads: &mut GruGrads,
) -> (Vec<f64>, Vec<f64>) {
    let (nh, ni) = (dims.hidden, dims.input);
    let GruCache { x, h, z, r, cand } = cache;

    let mut dh = vec![0.0; nh];
    let mut dx = vec![0.0; ni];
    let mut d_pre_z = vec![0.0; nh];
    let mut d_pre_cand = vec![0.0; nh];
    for i in 0..nh {
        let dz = dh_next[i] * (cand[i] - h[i]);
        d_pre_z[i] = dz * z[i] * (1.0 - z[i]);
        d_pre_cand[i] = dh_next[i] * z[i] * (1.0 - cand[i] * cand[i]);
        dh[i] = dh_next[i] * (1.0 - z[i]);
    }

    // candidate path: pre_cand = W_h x + U_h (r.*h) + b_h
    let rh: Vec<f64> = r.iter().zip(h).map(|(ri, hi)| ri * hi).collect();
    for i in 0..nh {
        let d = d_pre_cand[i];
        if d != 0.0 {
            for (j, xj) in x.iter().enumerate() {
                grads.w_h[i * ni + j] += d * xj;
            }
            for (j, rhj) in rh.iter().enumerate() {
                grads.u_h[i * nh + j] += d * rhj;
            }
            grads.b_h[i] += d;
        }
    }
    let mut d_rh = vec![0.0; nh];
    mat_t_vec_add(p.u_h, &d_pre_cand, nh, nh, &mut d_rh);
    mat_t_vec_add(p.w_h, &d_pre_cand, nh, ni, &mut dx);

    let mut d_pre_r = vec![0.0; nh];
    for i in 0..nh {
        dh[i] += d_rh[i] * r[i];
        d_pre_r[i] = d_rh[i] * h[i] * r[i] * (1.0 - r[i]);
    }

    // gate paths: pre_z = W_z x + U_z h + b_z, pre_r likewise
    for i in 0..nh {
        let dz = d_pre_z[i];
        let dr = d_pre_r[i];
        for (j, xj) in x.iter().enumerate() {
            grads.w_z[i * ni + j] += dz * xj;
            grads.w_r[i * ni + j] += dr * xj;
        }
        for (j, hj) in h.iter().enumerate() {
            grads.u_z[i * nh + j] += dz * hj;
            grads.u_r[i * nh + j] += dr * hj;
        }
        grads.b_z[i] += dz;
        grads.b_r[i] += dr;
    }
    mat_t_vec_add(p.u_z, &d_pre_z, nh, nh, &mut dh);
    mat_t_vec_add(p.u_r, &d_pre_r, nh, nh, &mut dh);
    mat_t_vec_add(p.w_z, &d_pre_z, nh, ni, &mut dx);
    mat_t_vec_add(p.w_r, &d_pre_r, nh, ni, &mut dx);

    (dh, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(dims: GruDims, bias_z: f64) -> Vec<f64> {
        let wi = dims.hidden * dims.input;
        let uh = dims.hidden * dims.hidden;
        let mut v = vec![0.0; 3 * wi + 3 * uh + 3 * dims.hidden];
        // layout used by this test only: [w_z u_z b_z w_r u_r b_r w_h u_h b_h]
        for i in 0..dims.hidden {
            v[wi + uh + i] = bias_z;
        }
        v
    }

    fn views(v: &[f64], dims: GruDims) -> GruParams<'_> {
        let wi = dims.hidden * dims.input;
        let uh = dims.hidden * dims.hidden;
        let nh = dims.hidden;
        let mut o = 0;
        let mut take = |n: usize| {
            let s = &v[o..o + n];
            o += n;
            s
        };
        GruParams {
            w_z: take(wi),
            u_z: take(uh),
            b_z: take(nh),
            w_r: take(wi),
            u_r: take(uh),
            b_r: take(nh),
            w_h: take(wi),
            u_h: take(uh),
            b_h: take(nh),
        }
    }

    #[test]
    fn update_gate_forced_closed_keeps_state() {
        let dims = GruDims {
            input: 3,
            hidden: 2,
        };
        // Large negative z bias drives the update gate to ~0.
        let v = zero_params(dims, -60.0);
        let p = views(&v, dims);
        let h = [0.4, -0.9];
        let x = [1.0, 2.0, -1.0];
        let h2 = gru_step(&h, &x, &p, dims).unwrap();
        for (a, b) in h2.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_gives_zero_state()
    {
        let dims = GruDims {
            input: 2,
            hidden: 3,
        };
        let v = zero_params(dims, 0.0);
        let p = views(&v, dims);
        let h2 = gru_step(&[0.0; 3], &[0.0; 2], &p, dims).unwrap();
        assert!(h2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_hand_evaluated_gate_equations() {
        let dims = GruDims {
            input: 1,
            hidden: 1,
        };
        // scalar cell: w_z=0.5 u_z=0.25 b_z=0.1 w_r=-0.3 u_r=0.2 b_r=0.0
        //              w_h=0.7 u_h=-0.4 b_h=0.05
        let v = vec![0.5, 0.25, 0.1, -0.3, 0.2, 0.0, 0.7, -0.4, 0.05];
        let p = views(&v, dims);
        let (h, x) = (0.6, -0.8);
        let z = sigmoid(0.5 * x + 0.25 * h + 0.1);
        let r = sigmoid(-0.3 * x + 0.2 * h + 0.0);
        let cand = (0.7 * x + (-0.4) * (r * h) + 0.05).tanh();
        let want = (1.0 - z) * h + z * cand;
        let got = gru_step(&[h], &[x], &p, dims).unwrap();
        assert!((got[0] - want).abs() < 1e-15, "{} vs {}", got[0], want);
    }

    #[test]
    fn dim_mismatch_errors() {
        let dims = GruDims {
            input: 2,
            hidden: 3,
        };
        let v = zero_params(dims, 0.0);
        let p = views(&v, dims);
        assert!(gru_step(&[0.0; 2], &[0.0; 2], &p, dims).is_err());
    }
}
