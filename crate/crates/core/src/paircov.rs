//! Agent-pair Gaussian over `(x1, y1, x2, y2)` parameterized as `Σ = L·D·Lᵀ`.
//!
//! `L` is unit lower-triangular with the six free entries laid out row by row
//!
//! ```text
//! 1 0 0 0
//! a 1 0 0
//! b c 1 0
//! d e f 1
//! ```
//!
//! and `D = diag(σ̂²)`. Any finite `a..f` and positive `σ̂` give a symmetric
//! positive-definite `Σ`, so nothing downstream has to check for it.
//!
//! The negative log-likelihood never forms `Σ⁻¹`: with `L z = x − μ` solved by
//! forward substitution,
//! `nll = (k/2)·ln 2π + Σᵢ ln σ̂ᵢ + ½ Σᵢ zᵢ² / σ̂ᵢ²`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{CustomOp, Tensor, Var};
use crate::error::{Error, Result};

pub const DIM: usize = 4;
/// Number of head outputs per pair and step.
pub const N_PARAMS: usize = 10;

pub type Mat4 = [[f64; 4]; 4];
pub type Mat2 = [[f64; 2]; 2];

/// `(k/2)·ln 2π` for k = 4.
pub fn log_norm_const() -> f64 {
    0.5 * DIM as f64 * (2.0 * PI).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovParams {
    /// σ̂ for x1, y1, x2, y2.
    pub sigma_hat: [f64; 4],
    /// a, b, c, d, e, f.
    pub lower: [f64; 6],
}

impl CovParams {
    pub fn new(sigma_hat: [f64; 4], lower: [f64; 6]) -> Result<Self> {
        if sigma_hat.iter().chain(&lower).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite covariance parameters: {sigma_hat:?} {lower:?}"
            )));
        }
        if sigma_hat.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation(format!(
                "σ̂ must be strictly positive, got {sigma_hat:?}"
            )));
        }
        Ok(CovParams { sigma_hat, lower })
    }

    /// Layout used by the prediction heads: 4 scales then `a..f`.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != N_PARAMS {
            return Err(Error::Dimension {
                op: "CovParams::from_slice",
                lhs: vec![v.len()],
                rhs: vec![N_PARAMS],
            });
        }
        CovParams::new([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7], v[8], v[9]])
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        out[..4].copy_from_slice(&self.sigma_hat);
        out[4..].copy_from_slice(&self.lower);
        out
    }

    pub fn identity() -> Self {
        CovParams {
            sigma_hat: [1.0; 4],
            lower: [0.0; 6],
        }
    }

    /// The unit lower-triangular factor.
    pub fn l_matrix(&self) -> Mat4 {
        let [a, b, c, d, e, f] = self.lower;
        [
            [1.0, 0.0, 0.0, 0.0],
            [a, 1.0, 0.0, 0.0],
            [b, c, 1.0, 0.0],
            [d, e, f, 1.0],
        ]
    }

    /// Solves `L z = r`.
    fn forward_sub(&self, r: [f64; 4]) -> [f64; 4] {
        let [a, b, c, d, e, f] = self.lower;
        let z1 = r[0];
        let z2 = r[1] - a * z1;
        let z3 = r[2] - b * z1 - c * z2;
        let z4 = r[3] - d * z1 - e * z2 - f * z3;
        [z1, z2, z3, z4]
    }

    /// Solves `Lᵀ v = w`.
    fn back_sub(&self, w: [f64; 4]) -> [f64; 4] {
        let [a, b, c, d, e, f] = self.lower;
        let v4 = w[3];
        let v3 = w[2] - f * v4;
        let v2 = w[1] - c * v3 - e * v4;
        let v1 = w[0] - a * v2 - b * v3 - d * v4;
        [v1, v2, v3, v4]
    }
}

/// Symmetric positive-definite 4×4 covariance of one agent pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCovariance {
    pub sigma: Mat4,
}

impl PairCovariance {
    pub const K: usize = DIM;
}

pub fn build_sigma(p: &CovParams) -> Result<PairCovariance> {
    let p = CovParams::new(p.sigma_hat, p.lower)?;
    let l = p.l_matrix();
    let dvals = p.sigma_hat.map(|s| s * s);
    let mut sigma = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..=j {
                s += l[i][k] * dvals[k] * l[j][k];
            }
            sigma[i][j] = s;
            sigma[j][i] = s;
        }
    }
    Ok(PairCovariance { sigma })
}

/// Multivariate Gaussian negative log-likelihood of `x` under `N(mu, Σ(p))`.
pub fn mgnll(p: &CovParams, mu: &[f64; 4], x: &[f64; 4]) -> f64 {
    let r = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2], x[3] - mu[3]];
    let z = p.forward_sub(r);
    let mut nll = log_norm_const();
    for i in 0..4 {
        let s = p.sigma_hat[i];
        nll += s.ln() + 0.5 * z[i] * z[i] / (s * s);
    }
    nll
}

/// Value and analytic gradients with respect to the ten parameters and μ.
pub fn mgnll_grad(p: &CovParams, mu: &[f64; 4], x: &[f64; 4]) -> (f64, [f64; 10], [f64; 4]) {
    let r = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2], x[3] - mu[3]];
    let z = p.forward_sub(r);
    let mut nll = log_norm_const();
    let mut g = [0.0; 10];
    let mut w = [0.0; 4];
    for i in 0..4 {
        let s = p.sigma_hat[i];
        let s2 = s * s;
        nll += s.ln() + 0.5 * z[i] * z[i] / s2;
        w[i] = z[i] / s2;
        g[i] = 1.0 / s - z[i] * z[i] / (s2 * s);
    }
    let v = p.back_sub(w);
    // ∂nll/∂L_ij = −v_i z_j for the free entries a..f.
    g[4] = -v[1] * z[0];
    g[5] = -v[2] * z[0];
    g[6] = -v[2] * z[1];
    g[7] = -v[3] * z[0];
    g[8] = -v[3] * z[1];
    g[9] = -v[3] * z[2];
    (nll, g, v.map(|vi| -vi))
}

pub fn density(p: &CovParams, mu: &[f64; 4], x: &[f64; 4]) -> f64 {
    (-mgnll(p, mu, x)).exp()
}

/// Ego-marginal, other-marginal and upper cross block of `Σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalBlocks {
    pub ego: Mat2,
    pub other: Mat2,
    pub cross: Mat2,
}

pub fn marginal_blocks(c: &PairCovariance) -> MarginalBlocks {
    let s = &c.sigma;
    MarginalBlocks {
        ego: [[s[0][0], s[0][1]], [s[1][0], s[1][1]]],
        other: [[s[2][2], s[2][3]], [s[3][2], s[3][3]]],
        cross: [[s[0][2], s[0][3]], [s[1][2], s[1][3]]],
    }
}

/// Draws `μ + L·D^{1/2}·z` with `z ~ N(0, I₄)`.
pub fn sample(p: &CovParams, mu: &[f64; 4], rng: &mut impl Rng) -> [f64; 4] {
    let l = p.l_matrix();
    let z: [f64; 4] = std::array::from_fn(|i| {
        let n: f64 = StandardNormal.sample(rng);
        p.sigma_hat[i] * n
    });
    std::array::from_fn(|i| mu[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
}

/// One weighted component of a Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: [f64; 4],
    pub params: CovParams,
}

/// Mode-weighted mixture of pair Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    components: Vec<MixtureComponent>,
}

pub fn mixture_combine(modes: Vec<MixtureComponent>) -> Result<Mixture> {
    if modes.is_empty() {
        return Err(Error::Validation("mixture needs at least one mode".into()));
    }
    if modes.iter().any(|m| !(m.weight >= 0.0)) {
        return Err(Error::Validation("mixture weights must be non-negative".into()));
    }
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    Ok(Mixture { components: modes })
}

impl Mixture {
    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn density(&self, x: &[f64; 4]) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * density(&c.params, &c.mu, x))
            .sum()
    }
}

struct MgnllOp {
    target: Vec<f64>,
}

impl CustomOp for MgnllOp {
    fn name(&self) -> &'static str {
        "mgnll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let (params, mu) = (inputs[0].data(), inputs[1].data());
        let mut gp = vec![0.0; params.len()];
        let mut gm = vec![0.0; mu.len()];
        for (i, &g) in grad.iter().enumerate() {
            let p = &params[i * N_PARAMS..(i + 1) * N_PARAMS];
            let cp = CovParams {
                sigma_hat: [p[0], p[1], p[2], p[3]],
                lower: [p[4], p[5], p[6], p[7], p[8], p[9]],
            };
            let m: [f64; 4] = mu[i * 4..i * 4 + 4].try_into().unwrap();
            let x: [f64; 4] = self.target[i * 4..i * 4 + 4].try_into().unwrap();
            let (_, dp, dm) = mgnll_grad(&cp, &m, &x);
            for j in 0..N_PARAMS {
                gp[i * N_PARAMS + j] += g * dp[j];
            }
            for j in 0..4 {
                gm[i * 4 + j] += g * dm[j];
            }
        }
        vec![gp, gm]
    }
}

/// Batched MGNLL on the tape: `params [.., 10]` (scales already positive),
/// `mu [.., 4]`, constant `target [.., 4]` → per-entry loss `[..]`.
pub fn mgnll_var<'t>(params: Var<'t>, mu: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let (ps, ms) = (params.shape(), mu.shape());
    let lead = &ps[..ps.len().saturating_sub(1)];
    if ps.last() != Some(&N_PARAMS)
        || ms.last() != Some(&DIM)
        || ms[..ms.len() - 1] != *lead
        || target.shape() != ms.as_slice()
    {
        return Err(Error::Dimension {
            op: "mgnll",
            lhs: ps.clone(),
            rhs: ms.clone(),
        });
    }
    let (pv, mv) = (params.value(), mu.value());
    let n: usize = lead.iter().product();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cp = CovParams::from_slice(&pv.data()[i * N_PARAMS..(i + 1) * N_PARAMS])?;
        let m: [f64; 4] = mv.data()[i * 4..i * 4 + 4].try_into().unwrap();
        let x: [f64; 4] = target.data()[i * 4..i * 4 + 4].try_into().unwrap();
        out.push(mgnll(&cp, &m, &x));
    }
    let value = Tensor::new(lead.to_vec(), out)?;
    Ok(params.tape().custom(
        &[params, mu],
        value,
        Box::new(MgnllOp {
            target: target.data().to_vec(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2PI: f64 = 1.8378770664093453;

    #[test]
    fn identity_params_give_identity() {
        let s = build_sigma(&CovParams::identity()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.sigma[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_lower_entry() {
        let p = CovParams::new([1.0; 4], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = build_sigma(&p).unwrap().sigma;
        let expected = [
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert_eq!(s, expected);
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let p = CovParams {
            sigma_hat: [1.0, f64::NAN, 1.0, 1.0],
            lower: [0.0; 6],
        };
        assert!(matches!(build_sigma(&p), Err(Error::Numeric(_))));
    }

    #[test]
    fn closed_form_anchors() {
        let id = CovParams::identity();
        let mu = [0.3, -1.0, 2.0, 0.5];
        assert!((mgnll(&id, &mu, &mu) - 2.0 * LN_2PI).abs() < 1e-12);
        assert!((mgnll(&id, &mu, &mu) - 3.675754).abs() < 1e-6);
        let x = [mu[0] + 1.0, mu[1], mu[2], mu[3]];
        assert!((mgnll(&id, &mu, &x) - (2.0 * LN_2PI + 0.5)).abs() < 1e-12);
        let p = CovParams::new([2.0, 1.0, 1.0, 1.0], [0.0; 6]).unwrap();
        assert!((mgnll(&p, &mu, &mu) - (2.0 * LN_2PI + 2f64.ln())).abs() < 1e-12);
        assert!((mgnll(&p, &mu, &mu) - 4.368901).abs() < 1e-6);
    }

    #[test]
    fn density_anchor_and_symmetry() {
        let id = CovParams::identity();
        let mu = [0.0; 4];
        let d = density(&id, &mu, &mu);
        assert!((d - 1.0 / (4.0 * PI * PI)).abs() < 1e-15);
        assert!((d - 0.0253303).abs() < 1e-7);
        let p = CovParams::new([0.7, 1.3, 0.4, 2.0], [0.3, -1.2, 0.5, 0.9, -0.1, 2.2]).unwrap();
        let mu = [1.0, 2.0, 3.0, 4.0];
        let v = [0.3, -0.2, 0.9, 0.1];
        let plus = [mu[0] + v[0], mu[1] + v[1], mu[2] + v[2], mu[3] + v[3]];
        let minus = [mu[0] - v[0], mu[1] - v[1], mu[2] - v[2], mu[3] - v[3]];
        assert!((density(&p, &mu, &plus) - density(&p, &mu, &minus)).abs() < 1e-15);
    }

    #[test]
    fn blocks_of_identity_and_block_diagonal() {
        let b = marginal_blocks(&build_sigma(&CovParams::identity()).unwrap());
        assert_eq!(b.ego, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(b.other, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(b.cross, [[0.0; 2]; 2]);
        // a and f only couple within each agent.
        let p = CovParams::new([1.5, 0.5, 2.0, 0.3], [0.8, 0.0, 0.0, 0.0, 0.0, -1.1]).unwrap();
        let b = marginal_blocks(&build_sigma(&p).unwrap());
        assert_eq!(b.cross, [[0.0; 2]; 2]);
    }

    #[test]
    fn tiny_scales_collapse_samples() {
        let p = CovParams::new([1e-9; 4], [0.0; 6]).unwrap();
        let mu = [1.0, -2.0, 3.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = sample(&p, &mu, &mut rng);
            for i in 0..4 {
                assert!((x[i] - mu[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn mixture_rules() {
        let c = MixtureComponent {
            weight: 1.0,
            mu: [0.0; 4],
            params: CovParams::identity(),
        };
        let x = [0.2, 0.1, -0.3, 0.0];
        let single = mixture_combine(vec![c]).unwrap();
        assert_eq!(single.density(&x), density(&c.params, &c.mu, &x));
        let half = MixtureComponent { weight: 0.5, ..c };
        let twin = mixture_combine(vec![half, half]).unwrap();
        assert!((twin.density(&x) - single.density(&x)).abs() < 1e-15);
        let bad = MixtureComponent { weight: 0.6, ..c };
        assert!(matches!(
            mixture_combine(vec![bad, half]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn minimized_at_mean() {
        let p = CovParams::new([0.7, 1.3, 0.4, 2.0], [0.3, -1.2, 0.5, 0.9, -0.1, 2.2]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let at = mgnll(&p, &x, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mu: [f64; 4] = std::array::from_fn(|i| x[i] + rng.random_range(-1.0..1.0));
            assert!(mgnll(&p, &mu, &x) >= at);
        }
    }
}
