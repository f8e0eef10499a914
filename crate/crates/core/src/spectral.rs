//! Fourier neural operator used as the coupling network.
//!
//! Fourier coefficients are taken against the period-1 basis
//! `exp(2πi (kx s + ky t))` on normalised node coordinates `s, t ∈ [0, 1]`, with
//! trapezoid quadrature weights. The coefficients of a band-limited periodic
//! input therefore do not depend on the grid resolution, which is what makes
//! the operator resolution-agnostic.
//!
//! Retained modes: `ky ∈ [0, m)` and `kx ∈ (-m, m)`; of the conjugate pairs only
//! the half `ky > 0` or (`ky = 0`, `kx ≥ 0`) is stored, and the real part of the
//! inverse sum is doubled for every mode except `(0, 0)`.
//!
//! Activations are stored sample-major as `[sample][channel][node]`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::linalg::gemm;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // ½(1 + tanh u) = σ(2u); one exp is cheaper than tanh
            Activation::Gelu => z * sigmoid(2.0 * GELU_C * (z + 0.044715 * z * z * z)),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let s = sigmoid(2.0 * GELU_C * (z + 0.044715 * z * z * z));
                s + 2.0 * z * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralOperatorConfig {
    /// Spatial dimension of the grids the operator runs on (1 or 2).
    pub dims: usize,
    /// Retained frequencies per axis.
    pub modes: usize,
    pub width: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl SpectralOperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dims) {
            return Err(Error::invalid(format!("operator dims must be 1 or 2, got {}", self.dims)));
        }
        if self.modes == 0 || self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(
                "modes, width and channel counts must all be at least 1",
            ));
        }
        Ok(())
    }

    /// Number of stored complex modes `|S|`.
    pub fn mode_count(&self) -> usize {
        let m = self.modes;
        if self.dims == 1 {
            m
        } else {
            m + (m - 1) * (2 * m - 1)
        }
    }
}

/// Exact number of real parameters.
pub fn parameter_count(config: &SpectralOperatorConfig) -> usize {
    let w = config.width;
    let layer = 2 * config.mode_count() * w * w + w * w + w;
    config.in_channels * w + w + config.depth * layer + config.out_channels * w + config.out_channels
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    spec_re: usize,
    spec_im: usize,
    w: usize,
    b: usize,
}

/// Offsets of each parameter group in the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    lift_w: usize,
    lift_b: usize,
    layers: Vec<LayerOffsets>,
    proj_w: usize,
    proj_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &SpectralOperatorConfig) -> Self {
        let w = c.width;
        let s = c.mode_count();
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let lift_w = take(w * c.in_channels);
        let lift_b = take(w);
        let layers = (0..c.depth)
            .map(|_| LayerOffsets {
                spec_re: take(s * w * w),
                spec_im: take(s * w * w),
                w: take(w * w),
                b: take(w),
            })
            .collect();
        let proj_w = take(c.out_channels * w);
        let proj_b = take(c.out_channels);
        Self {
            lift_w,
            lift_b,
            layers,
            proj_w,
            proj_b,
            total: at,
        }
    }
}

/// Quadrature-weighted Fourier matrices for one grid and mode count.
#[derive(Debug, Clone)]
pub struct FourierBasis {
    grid: Grid,
    modes: usize,
    n0: usize,
    n1: usize,
    k0: usize,
    k1: usize,
    /// `n1 x 2K1`: `[w cos | -w sin]`.
    e1_fwd: Vec<f64>,
    /// `2K1 x n1`: rows `cos`, then `-sin`.
    e1_inv: Vec<f64>,
    /// `2K0 x n0`: rows `w cos`, then `w sin`.
    e0_fwd: Vec<f64>,
    /// `n0 x 2K0`: `[cos | sin]`.
    e0_inv: Vec<f64>,
    /// `(kx index, ky)` per stored mode.
    mode_list: Vec<(usize, usize)>,
    /// Hermitian reconstruction factor per stored mode.
    factor: Vec<f64>,
}

fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|j| if j == 0 || j == n - 1 { 0.5 * h } else { h })
        .collect()
}

fn unit_coordinates(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

impl FourierBasis {
    pub fn new(grid: &Grid, modes: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("mode count must be at least 1"));
        }
        for &r in grid.resolution() {
            if r < 2 * modes {
                return Err(Error::invalid(format!(
                    "grid resolution {r} is below twice the retained mode count {modes}"
                )));
            }
        }
        let two_d = grid.dims() == 2;
        let n0 = grid.rows();
        let n1 = grid.cols();
        let k1 = modes;
        let k0 = if two_d { 2 * modes - 1 } else { 1 };

        let w1 = trapezoid_weights(n1);
        let t1 = unit_coordinates(n1);
        let mut e1_fwd = vec![0.0; n1 * 2 * k1];
        let mut e1_inv = vec![0.0; 2 * k1 * n1];
        for j in 0..n1 {
            for ky in 0..k1 {
                let (s, c) = (TAU * ky as f64 * t1[j]).sin_cos();
                e1_fwd[j * 2 * k1 + ky] = w1[j] * c;
                e1_fwd[j * 2 * k1 + k1 + ky] = -w1[j] * s;
                e1_inv[ky * n1 + j] = c;
                e1_inv[(k1 + ky) * n1 + j] = -s;
            }
        }

        let mut e0_fwd = Vec::new();
        let mut e0_inv = Vec::new();
        if two_d {
            let w0 = trapezoid_weights(n0);
            let t0 = unit_coordinates(n0);
            e0_fwd = vec![0.0; 2 * k0 * n0];
            e0_inv = vec![0.0; n0 * 2 * k0];
            for i in 0..n0 {
                for kxi in 0..k0 {
                    let kx = kxi as f64 - (modes - 1) as f64;
                    let (s, c) = (TAU * kx * t0[i]).sin_cos();
                    e0_fwd[kxi * n0 + i] = w0[i] * c;
                    e0_fwd[(k0 + kxi) * n0 + i] = w0[i] * s;
                    e0_inv[i * 2 * k0 + kxi] = c;
                    e0_inv[i * 2 * k0 + k0 + kxi] = s;
                }
            }
        }

        let mut mode_list = Vec::new();
        let mut factor = Vec::new();
        let zero = modes - 1; // kx index of kx = 0
        if two_d {
            for kx in 0..modes {
                mode_list.push((zero + kx, 0));
                factor.push(if kx == 0 { 1.0 } else { 2.0 });
            }
            for ky in 1..modes {
                for kxi in 0..k0 {
                    mode_list.push((kxi, ky));
                    factor.push(2.0);
                }
            }
        } else {
            for ky in 0..modes {
                mode_list.push((0, ky));
                factor.push(if ky == 0 { 1.0 } else { 2.0 });
            }
        }

        Ok(Self {
            grid: grid.clone(),
            modes,
            n0,
            n1,
            k0,
            k1,
            e1_fwd,
            e1_inv,
            e0_fwd,
            e0_inv,
            mode_list,
            factor,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn mode_count(&self) -> usize {
        self.mode_list.len()
    }

    fn nodes(&self) -> usize {
        self.n0 * self.n1
    }

    fn two_d(&self) -> bool {
        self.grid.dims() == 2
    }

    /// Coefficients of `slabs` node-functions, returned mode-major
    /// (`[mode][slab]`, real and imaginary parts).
    pub fn forward(&self, x: &[f64], slabs: usize) -> (Vec<f64>, Vec<f64>) {
        let (n0, n1, k0, k1) = (self.n0, self.n1, self.k0, self.k1);
        let s_count = self.mode_count();
        debug_assert_eq!(x.len(), slabs * self.nodes());
        let mut z = vec![0.0; slabs * n0 * 2 * k1];
        gemm(
            slabs * n0, n1, 2 * k1, 1.0, x, n1, 1, &self.e1_fwd, 2 * k1, 1, 0.0, &mut z, 2 * k1, 1,
        );
        let mut fr = vec![0.0; s_count * slabs];
        let mut fi = vec![0.0; s_count * slabs];
        if !self.two_d() {
            for r in 0..slabs {
                for (s, &(_, ky)) in self.mode_list.iter().enumerate() {
                    fr[s * slabs + r] = z[r * 2 * k1 + ky];
                    fi[s * slabs + r] = z[r * 2 * k1 + k1 + ky];
                }
            }
            return (fr, fi);
        }
        let pw = 2 * k1;
        let mut pq = vec![0.0; 2 * k0 * pw];
        for r in 0..slabs {
            let zr = &z[r * n0 * pw..(r + 1) * n0 * pw];
            gemm(2 * k0, n0, pw, 1.0, &self.e0_fwd, n0, 1, zr, pw, 1, 0.0, &mut pq, pw, 1);
            for (s, &(kxi, ky)) in self.mode_list.iter().enumerate() {
                fr[s * slabs + r] = pq[kxi * pw + ky] + pq[(k0 + kxi) * pw + k1 + ky];
                fi[s * slabs + r] = pq[kxi * pw + k1 + ky] - pq[(k0 + kxi) * pw + ky];
            }
        }
        (fr, fi)
    }

    /// Adjoint of [`FourierBasis::forward`].
    pub fn forward_adjoint(&self, dfr: &[f64], dfi: &[f64], slabs: usize) -> Vec<f64> {
        let (n0, n1, k0, k1) = (self.n0, self.n1, self.k0, self.k1);
        let pw = 2 * k1;
        let mut dz = vec![0.0; slabs * n0 * pw];
        if !self.two_d() {
            for r in 0..slabs {
                for (s, &(_, ky)) in self.mode_list.iter().enumerate() {
                    dz[r * pw + ky] += dfr[s * slabs + r];
                    dz[r * pw + k1 + ky] += dfi[s * slabs + r];
                }
            }
        } else {
            let mut dpq = vec![0.0; 2 * k0 * pw];
            for r in 0..slabs {
                dpq.iter_mut().for_each(|v| *v = 0.0);
                for (s, &(kxi, ky)) in self.mode_list.iter().enumerate() {
                    let gr = dfr[s * slabs + r];
                    let gi = dfi[s * slabs + r];
                    dpq[kxi * pw + ky] += gr;
                    dpq[(k0 + kxi) * pw + k1 + ky] += gr;
                    dpq[kxi * pw + k1 + ky] += gi;
                    dpq[(k0 + kxi) * pw + ky] -= gi;
                }
                let dzr = &mut dz[r * n0 * pw..(r + 1) * n0 * pw];
                gemm(n0, 2 * k0, pw, 1.0, &self.e0_fwd, 1, n0, &dpq, pw, 1, 0.0, dzr, pw, 1);
            }
        }
        let mut dx = vec![0.0; slabs * n0 * n1];
        gemm(slabs * n0, pw, n1, 1.0, &dz, pw, 1, &self.e1_fwd, 1, pw, 0.0, &mut dx, n1, 1);
        dx
    }

    /// Real node values of the truncated series with mode-major coefficients.
    pub fn inverse(&self, gr: &[f64], gi: &[f64], slabs: usize) -> Vec<f64> {
        let (n0, n1, k0, k1) = (self.n0, self.n1, self.k0, self.k1);
        let pw = 2 * k1;
        let mut h = vec![0.0; slabs * n0 * pw];
        if !self.two_d() {
            for r in 0..slabs {
                for (s, &(_, ky)) in self.mode_list.iter().enumerate() {
                    let c = self.factor[s];
                    h[r * pw + ky] = c * gr[s * slabs + r];
                    h[r * pw + k1 + ky] = c * gi[s * slabs + r];
                }
            }
        } else {
            let mut m = vec![0.0; 2 * k0 * pw];
            for r in 0..slabs {
                m.iter_mut().for_each(|v| *v = 0.0);
                for (s, &(kxi, ky)) in self.mode_list.iter().enumerate() {
                    let c = self.factor[s];
                    let re = c * gr[s * slabs + r];
                    let im = c * gi[s * slabs + r];
                    m[kxi * pw + ky] = re;
                    m[kxi * pw + k1 + ky] = im;
                    m[(k0 + kxi) * pw + ky] = -im;
                    m[(k0 + kxi) * pw + k1 + ky] = re;
                }
                let hr = &mut h[r * n0 * pw..(r + 1) * n0 * pw];
                gemm(n0, 2 * k0, pw, 1.0, &self.e0_inv, 2 * k0, 1, &m, pw, 1, 0.0, hr, pw, 1);
            }
        }
        let mut y = vec![0.0; slabs * n0 * n1];
        gemm(slabs * n0, pw, n1, 1.0, &h, pw, 1, &self.e1_inv, n1, 1, 0.0, &mut y, n1, 1);
        y
    }

    /// Adjoint of [`FourierBasis::inverse`].
    pub fn inverse_adjoint(&self, dy: &[f64], slabs: usize) -> (Vec<f64>, Vec<f64>) {
        let (n0, n1, k0, k1) = (self.n0, self.n1, self.k0, self.k1);
        let pw = 2 * k1;
        let s_count = self.mode_count();
        let mut dh = vec![0.0; slabs * n0 * pw];
        gemm(slabs * n0, n1, pw, 1.0, dy, n1, 1, &self.e1_inv, 1, n1, 0.0, &mut dh, pw, 1);
        let mut dgr = vec![0.0; s_count * slabs];
        let mut dgi = vec![0.0; s_count * slabs];
        if !self.two_d() {
            for r in 0..slabs {
                for (s, &(_, ky)) in self.mode_list.iter().enumerate() {
                    let c = self.factor[s];
                    dgr[s * slabs + r] = c * dh[r * pw + ky];
                    dgi[s * slabs + r] = c * dh[r * pw + k1 + ky];
                }
            }
            return (dgr, dgi);
        }
        let mut dm = vec![0.0; 2 * k0 * pw];
        for r in 0..slabs {
            let dhr = &dh[r * n0 * pw..(r + 1) * n0 * pw];
            gemm(2 * k0, n0, pw, 1.0, &self.e0_inv, 1, 2 * k0, dhr, pw, 1, 0.0, &mut dm, pw, 1);
            for (s, &(kxi, ky)) in self.mode_list.iter().enumerate() {
                let c = self.factor[s];
                dgr[s * slabs + r] = c * (dm[kxi * pw + ky] + dm[(k0 + kxi) * pw + k1 + ky]);
                dgi[s * slabs + r] = c * (dm[kxi * pw + k1 + ky] - dm[(k0 + kxi) * pw + ky]);
            }
        }
        (dgr, dgi)
    }
}

/// `out[b][o][n] = Σ_c w[o][c] x[b][c][n] (+ bias[o])`, accumulated with `beta`.
fn pointwise(w: &[f64], x: &[f64], batch: usize, cin: usize, cout: usize, n: usize, beta: f64, out: &mut [f64]) {
    for b in 0..batch {
        gemm(
            cout,
            cin,
            n,
            1.0,
            w,
            cin,
            1,
            &x[b * cin * n..(b + 1) * cin * n],
            n,
            1,
            beta,
            &mut out[b * cout * n..(b + 1) * cout * n],
            n,
            1,
        );
    }
}

fn add_bias(bias: &[f64], batch: usize, n: usize, out: &mut [f64]) {
    let c = bias.len();
    for b in 0..batch {
        for (o, &bo) in bias.iter().enumerate() {
            out[(b * c + o) * n..(b * c + o + 1) * n].iter_mut().for_each(|v| *v += bo);
        }
    }
}

/// Gradients of a pointwise linear map: accumulates `dw += Σ_b dy_b x_bᵀ`,
/// `db += Σ dy`, and (optionally) `dx += wᵀ dy`.
#[allow(clippy::too_many_arguments)]
fn pointwise_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    n: usize,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    if let Some(dw) = dw {
        for b in 0..batch {
            let dyb = &dy[b * cout * n..(b + 1) * cout * n];
            let xb = &x[b * cin * n..(b + 1) * cin * n];
            gemm(cout, n, cin, 1.0, dyb, n, 1, xb, 1, n, 1.0, dw, cin, 1);
        }
    }
    if let Some(db) = db {
        for b in 0..batch {
            for o in 0..cout {
                db[o] += dy[(b * cout + o) * n..(b * cout + o + 1) * n].iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        for b in 0..batch {
            gemm(
                cin,
                cout,
                n,
                1.0,
                w,
                1,
                cin,
                &dy[b * cout * n..(b + 1) * cout * n],
                n,
                1,
                1.0,
                &mut dx[b * cin * n..(b + 1) * cin * n],
                n,
                1,
            );
        }
    }
}

/// Weights of a single spectral layer `v ↦ F⁻¹(R · F v) + W v + b`, square in
/// the channel width. `spec_re`/`spec_im` are `[mode][out][in]`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralLayerParams<'a> {
    pub width: usize,
    pub spec_re: &'a [f64],
    pub spec_im: &'a [f64],
    pub pointwise: &'a [f64],
    pub bias: &'a [f64],
}

/// Mode-wise complex channel mixing: `G[s] = F[s] R[s]ᵀ`, with `F[s]` a
/// `batch x w` block.
fn mix(
    fr: &[f64],
    fi: &[f64],
    re: &[f64],
    im: &[f64],
    modes: usize,
    batch: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gr = vec![0.0; modes * batch * w];
    let mut gi = vec![0.0; modes * batch * w];
    let bw = batch * w;
    let ww = w * w;
    for s in 0..modes {
        let (fr_s, fi_s) = (&fr[s * bw..(s + 1) * bw], &fi[s * bw..(s + 1) * bw]);
        let (re_s, im_s) = (&re[s * ww..(s + 1) * ww], &im[s * ww..(s + 1) * ww]);
        let gr_s = &mut gr[s * bw..(s + 1) * bw];
        gemm(batch, w, w, 1.0, fr_s, w, 1, re_s, 1, w, 0.0, gr_s, w, 1);
        gemm(batch, w, w, -1.0, fi_s, w, 1, im_s, 1, w, 1.0, gr_s, w, 1);
        let gi_s = &mut gi[s * bw..(s + 1) * bw];
        gemm(batch, w, w, 1.0, fi_s, w, 1, re_s, 1, w, 0.0, gi_s, w, 1);
        gemm(batch, w, w, 1.0, fr_s, w, 1, im_s, 1, w, 1.0, gi_s, w, 1);
    }
    (gr, gi)
}

#[allow(clippy::too_many_arguments)]
fn mix_backward(
    fr: &[f64],
    fi: &[f64],
    re: &[f64],
    im: &[f64],
    dgr: &[f64],
    dgi: &[f64],
    modes: usize,
    batch: usize,
    w: usize,
    mut dweights: Option<(&mut [f64], &mut [f64])>,
) -> (Vec<f64>, Vec<f64>) {
    let bw = batch * w;
    let ww = w * w;
    let mut dfr = vec![0.0; modes * bw];
    let mut dfi = vec![0.0; modes * bw];
    for s in 0..modes {
        let (fr_s, fi_s) = (&fr[s * bw..(s + 1) * bw], &fi[s * bw..(s + 1) * bw]);
        let (dgr_s, dgi_s) = (&dgr[s * bw..(s + 1) * bw], &dgi[s * bw..(s + 1) * bw]);
        let (re_s, im_s) = (&re[s * ww..(s + 1) * ww], &im[s * ww..(s + 1) * ww]);
        {
            let dfr_s = &mut dfr[s * bw..(s + 1) * bw];
            gemm(batch, w, w, 1.0, dgr_s, w, 1, re_s, w, 1, 0.0, dfr_s, w, 1);
            gemm(batch, w, w, 1.0, dgi_s, w, 1, im_s, w, 1, 1.0, dfr_s, w, 1);
        }
        {
            let dfi_s = &mut dfi[s * bw..(s + 1) * bw];
            gemm(batch, w, w, -1.0, dgr_s, w, 1, im_s, w, 1, 0.0, dfi_s, w, 1);
            gemm(batch, w, w, 1.0, dgi_s, w, 1, re_s, w, 1, 1.0, dfi_s, w, 1);
        }
        if let Some((dre, dim)) = dweights.as_mut() {
            let dre_s = &mut dre[s * ww..(s + 1) * ww];
            gemm(w, batch, w, 1.0, dgr_s, 1, w, fr_s, w, 1, 1.0, dre_s, w, 1);
            gemm(w, batch, w, 1.0, dgi_s, 1, w, fi_s, w, 1, 1.0, dre_s, w, 1);
            let dim_s = &mut dim[s * ww..(s + 1) * ww];
            gemm(w, batch, w, -1.0, dgr_s, 1, w, fi_s, w, 1, 1.0, dim_s, w, 1);
            gemm(w, batch, w, 1.0, dgi_s, 1, w, fr_s, w, 1, 1.0, dim_s, w, 1);
        }
    }
    (dfr, dfi)
}

/// Pre-activation output of one spectral layer on a batch; also returns the
/// input's Fourier coefficients for reuse in the backward pass.
fn layer_forward(
    basis: &FourierBasis,
    p: &SpectralLayerParams<'_>,
    v: &[f64],
    batch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = p.width;
    let n = basis.nodes();
    let modes = basis.mode_count();
    let (fr, fi) = basis.forward(v, batch * w);
    let (gr, gi) = mix(&fr, &fi, p.spec_re, p.spec_im, modes, batch, w);
    let mut z = basis.inverse(&gr, &gi, batch * w);
    pointwise(p.pointwise, v, batch, w, w, n, 1.0, &mut z);
    add_bias(p.bias, batch, n, &mut z);
    (z, fr, fi)
}

/// One spectral layer (without activation) applied to a single function.
pub fn spectral_layer(f: &GridFunction, modes: usize, params: &SpectralLayerParams<'_>) -> Result<GridFunction> {
    let w = params.width;
    if f.channels() != w {
        return Err(Error::shape(format!(
            "layer width {w} but input has {} channels",
            f.channels()
        )));
    }
    let basis = FourierBasis::new(f.grid(), modes)?;
    let s = basis.mode_count();
    if params.spec_re.len() != s * w * w
        || params.spec_im.len() != s * w * w
        || params.pointwise.len() != w * w
        || params.bias.len() != w
    {
        return Err(Error::shape("spectral layer parameter sizes do not match width and modes"));
    }
    let (z, _, _) = layer_forward(&basis, params, f.values(), 1);
    GridFunction::new(f.grid().clone(), w, z)
}

/// Intermediate values recorded by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct SpectralTape {
    batch: usize,
    input: Vec<f64>,
    /// Input of each spectral layer, then the input of the projection.
    hidden: Vec<Vec<f64>>,
    /// Pre-activation of each spectral layer.
    pre: Vec<Vec<f64>>,
    coeffs: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Lift → spectral layers → projection, over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    config: SpectralOperatorConfig,
    layout: Layout,
}

impl SpectralOperator {
    pub fn new(config: SpectralOperatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            layout: Layout::new(&config),
            config,
        })
    }

    pub fn config(&self) -> &SpectralOperatorConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    /// Random initial parameters. Lift, pointwise and projection weights are
    /// uniform in `±1/sqrt(fan_in)`, spectral weights uniform in `±1/width`,
    /// biases zero. With `zero_projection` the network output is identically 0.
    pub fn init_params(&self, rng: &mut impl Rng, zero_projection: bool) -> Vec<f64> {
        let c = &self.config;
        let l = &self.layout;
        let w = c.width;
        let mut p = vec![0.0; l.total];
        let mut fill = |p: &mut [f64], scale: f64| {
            let d = Uniform::new_inclusive(-scale, scale).expect("finite scale");
            p.iter_mut().for_each(|v| *v = d.sample(rng));
        };
        fill(&mut p[l.lift_w..l.lift_w + w * c.in_channels], 1.0 / (c.in_channels as f64).sqrt());
        let s = c.mode_count();
        for lo in &l.layers {
            fill(&mut p[lo.spec_re..lo.spec_re + s * w * w], 1.0 / w as f64);
            fill(&mut p[lo.spec_im..lo.spec_im + s * w * w], 1.0 / w as f64);
            fill(&mut p[lo.w..lo.w + w * w], 1.0 / (w as f64).sqrt());
        }
        if !zero_projection {
            fill(&mut p[l.proj_w..l.proj_w + c.out_channels * w], 1.0 / (w as f64).sqrt());
        }
        p
    }

    fn layer<'a>(&self, params: &'a [f64], i: usize, s: usize) -> SpectralLayerParams<'a> {
        let w = self.config.width;
        let lo = self.layout.layers[i];
        SpectralLayerParams {
            width: w,
            spec_re: &params[lo.spec_re..lo.spec_re + s * w * w],
            spec_im: &params[lo.spec_im..lo.spec_im + s * w * w],
            pointwise: &params[lo.w..lo.w + w * w],
            bias: &params[lo.b..lo.b + w],
        }
    }

    fn check(&self, basis: &FourierBasis, params: &[f64], input: &[f64], batch: usize) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::shape(format!(
                "{} parameters supplied, operator needs {}",
                params.len(),
                self.layout.total
            )));
        }
        if basis.grid().dims() != self.config.dims || basis.modes() != self.config.modes {
            return Err(Error::shape("Fourier basis does not match the operator configuration"));
        }
        if input.len() != batch * self.config.in_channels * basis.nodes() {
            return Err(Error::shape(format!(
                "input of length {} is not {batch} samples x {} channels x {} nodes",
                input.len(),
                self.config.in_channels,
                basis.nodes()
            )));
        }
        Ok(())
    }

    /// Apply to a batch laid out `[sample][in channel][node]`.
    pub fn apply(&self, basis: &FourierBasis, params: &[f64], input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.run(basis, params, input, batch, false).map(|(y, _)| y)
    }

    /// As [`SpectralOperator::apply`], recording a tape for [`SpectralOperator::backward`].
    pub fn apply_taped(
        &self,
        basis: &FourierBasis,
        params: &[f64],
        input: &[f64],
        batch: usize,
    ) -> Result<(Vec<f64>, SpectralTape)> {
        self.run(basis, params, input, batch, true)
            .map(|(y, t)| (y, t.expect("tape recorded")))
    }

    fn run(
        &self,
        basis: &FourierBasis,
        params: &[f64],
        input: &[f64],
        batch: usize,
        record: bool,
    ) -> Result<(Vec<f64>, Option<SpectralTape>)> {
        self.check(basis, params, input, batch)?;
        let c = &self.config;
        let l = &self.layout;
        let (w, n, s) = (c.width, basis.nodes(), basis.mode_count());
        let mut v = vec![0.0; batch * w * n];
        pointwise(&params[l.lift_w..l.lift_b], input, batch, c.in_channels, w, n, 0.0, &mut v);
        add_bias(&params[l.lift_b..l.lift_b + w], batch, n, &mut v);
        let mut hidden = Vec::new();
        let mut pre = Vec::new();
        let mut coeffs = Vec::new();
        for i in 0..c.depth {
            let (z, fr, fi) = layer_forward(basis, &self.layer(params, i, s), &v, batch);
            let next: Vec<f64> = z.iter().map(|&x| c.activation.apply(x)).collect();
            if record {
                hidden.push(std::mem::replace(&mut v, next));
                pre.push(z);
                coeffs.push((fr, fi));
            } else {
                v = next;
            }
        }
        let mut out = vec![0.0; batch * c.out_channels * n];
        pointwise(&params[l.proj_w..l.proj_b], &v, batch, w, c.out_channels, n, 0.0, &mut out);
        add_bias(&params[l.proj_b..l.proj_b + c.out_channels], batch, n, &mut out);
        let tape = record.then(|| {
            hidden.push(v);
            SpectralTape {
                batch,
                input: input.to_vec(),
                hidden,
                pre,
                coeffs,
            }
        });
        Ok((out, tape))
    }

    /// Vector-Jacobian product: accumulates `∂⟨dout, y⟩/∂θ` into `dparams`
    /// and `∂⟨dout, y⟩/∂input` into `dinput`, each when given.
    pub fn backward(
        &self,
        basis: &FourierBasis,
        params: &[f64],
        tape: &SpectralTape,
        dout: &[f64],
        mut dparams: Option<&mut [f64]>,
        dinput: Option<&mut [f64]>,
    ) {
        let c = &self.config;
        let l = &self.layout;
        let (w, n, s) = (c.width, basis.nodes(), basis.mode_count());
        let batch = tape.batch;
        if let Some(d) = dparams.as_deref() {
            assert_eq!(d.len(), l.total, "gradient buffer size");
        }
        assert_eq!(dout.len(), batch * c.out_channels * n, "output gradient size");

        let mut dv = vec![0.0; batch * w * n];
        {
            let (dw, db) = match dparams.as_deref_mut() {
                Some(d) => {
                    let (dw, rest) = d[l.proj_w..].split_at_mut(c.out_channels * w);
                    (Some(dw), Some(&mut rest[..c.out_channels]))
                }
                None => (None, None),
            };
            pointwise_backward(
                &params[l.proj_w..l.proj_b],
                &tape.hidden[c.depth],
                dout,
                batch,
                w,
                c.out_channels,
                n,
                dw,
                db,
                Some(&mut dv),
            );
        }
        for i in (0..c.depth).rev() {
            let lo = l.layers[i];
            let p = self.layer(params, i, s);
            let dz: Vec<f64> = dv
                .iter()
                .zip(&tape.pre[i])
                .map(|(&g, &z)| g * c.activation.derivative(z))
                .collect();
            let v_in = &tape.hidden[i];
            let mut dv_in = vec![0.0; batch * w * n];
            {
                let (dw, db) = match dparams.as_deref_mut() {
                    Some(d) => {
                        let (head, tail) = d.split_at_mut(lo.b);
                        (Some(&mut head[lo.w..lo.w + w * w]), Some(&mut tail[..w]))
                    }
                    None => (None, None),
                };
                pointwise_backward(p.pointwise, v_in, &dz, batch, w, w, n, dw, db, Some(&mut dv_in));
            }
            let (dgr, dgi) = basis.inverse_adjoint(&dz, batch * w);
            let (fr, fi) = &tape.coeffs[i];
            let dweights = dparams.as_deref_mut().map(|d| {
                let (head, tail) = d.split_at_mut(lo.spec_im);
                (&mut head[lo.spec_re..lo.spec_re + s * w * w], &mut tail[..s * w * w])
            });
            let (dfr, dfi) = mix_backward(fr, fi, p.spec_re, p.spec_im, &dgr, &dgi, s, batch, w, dweights);
            let dspec = basis.forward_adjoint(&dfr, &dfi, batch * w);
            dv_in.iter_mut().zip(&dspec).for_each(|(a, b)| *a += b);
            dv = dv_in;
        }
        let (dw, db) = match dparams {
            Some(d) => {
                let (dw, rest) = d[l.lift_w..].split_at_mut(w * c.in_channels);
                (Some(dw), Some(&mut rest[..w]))
            }
            None => (None, None),
        };
        pointwise_backward(
            &params[l.lift_w..l.lift_b],
            &tape.input,
            &dv,
            batch,
            c.in_channels,
            w,
            n,
            dw,
            db,
            dinput,
        );
    }

    /// Apply to one function; returns a function with `out_channels` channels.
    pub fn apply_function(&self, params: &[f64], f: &GridFunction) -> Result<GridFunction> {
        if f.channels() != self.config.in_channels {
            return Err(Error::shape(format!(
                "operator expects {} input channels, got {}",
                self.config.in_channels,
                f.channels()
            )));
        }
        let basis = FourierBasis::new(f.grid(), self.config.modes)?;
        let y = self.apply(&basis, params, f.values(), 1)?;
        GridFunction::new(f.grid().clone(), self.config.out_channels, y)
    }
}
