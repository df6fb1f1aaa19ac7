//! Central-difference gradient checking.
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic| + |numeric|, abs_floor)`, and the
//! numeric derivative is `(f(θ+h) − f(θ−h)) / 2h` evaluated in f64 from the
//! graph's full-precision scalar loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Init, Tensor};

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, truncation error O(h²).
    #[default]
    Central,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, truncation error
    /// O(h⁴). Lets a deep f32 network use a step large enough to stay
    /// above rounding noise.
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f32,
    pub stencil: Stencil,
    pub tol: f64,
    /// Coordinates probed per tensor; tensors smaller than this are checked
    /// exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator so that coordinates
    /// whose true gradient is zero compare absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-2,
            stencil: Stencil::Central,
            tol: 1e-3,
            coords_per_tensor: 32,
            seed: 0,
            abs_floor: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(abs_floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare a supplied analytic gradient against central differences of `loss`.
pub fn grad_check_with<L>(
    loss: L,
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
{
    if !(cfg.h > 0.0) {
        return Err(NumError::Config(format!("grad_check step must be > 0, got {}", cfg.h)));
    }
    if analytic.len() != params.len() {
        return contract("grad_check: one analytic gradient per parameter required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (ti, (p, a)) in params.iter().zip(analytic).enumerate() {
        if a.shape() != p.shape() {
            return contract(format!("grad_check: gradient {ti} shape differs from parameter"));
        }
        let coords: Vec<usize> = if cfg.coords_per_tensor >= p.numel() {
            (0..p.numel()).collect()
        } else {
            sample(&mut rng, p.numel(), cfg.coords_per_tensor).into_vec()
        };
        let mut max_rel = 0.0f64;
        for &c in &coords {
            let orig = work[ti].data()[c];
            let mut at = |k: f32| -> Result<(f64, f64)> {
                work[ti].data_mut()[c] = orig + k * cfg.h;
                let v = loss(&work)?;
                work[ti].data_mut()[c] = orig;
                // the actually representable offset, not the nominal one
                Ok((v, (orig + k * cfg.h) as f64 - orig as f64))
            };
            let numeric = match cfg.stencil {
                Stencil::Central => {
                    let ((plus, dp), (minus, dm)) = (at(1.0)?, at(-1.0)?);
                    (plus - minus) / (dp - dm)
                }
                Stencil::FivePoint => {
                    let ((p1, _), (m1, _), (p2, _), (m2, _)) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
                    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * cfg.h as f64)
                }
            };
            let an = a.data()[c] as f64;
            if !numeric.is_finite() || !an.is_finite() {
                return Err(NumError::NonFinite {
                    node: ti,
                    op: "grad_check",
                });
            }
            max_rel = max_rel.max(relative_error(an, numeric, cfg.abs_floor));
        }
        tensors.push(TensorCheck {
            index: ti,
            coords_checked: coords.len(),
            max_rel_error: max_rel,
            passed: max_rel <= cfg.tol,
        });
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradCheckReport { tensors, passed })
}

/// Gradient check of a graph-building function. `build` receives the graph
/// and one leaf per parameter and must return a scalar loss.
pub fn grad_check<F>(build: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        g.scalar(loss)
    };
    grad_check_with(eval, params, &analytic, cfg)
}

/// Random-instance gradient check of every primitive op. Non-scalar outputs
/// are reduced with a fixed random weighting so every output coordinate
/// contributes to the loss.
pub fn primitive_suite(cfg: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let seed = cfg.seed;
    let normal = |shape: &[usize], s: u64| Tensor::init(shape, Init::Normal { mean: 0.0, std: 1.0 }, seed.wrapping_mul(31).wrapping_add(s));
    // keep relu inputs away from the kink
    let away_from_zero = |t: Tensor| {
        let data = t.data().iter().map(|&v| if v.abs() < 0.1 { v + 0.2_f32.copysign(v) } else { v }).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = Tensor::init(g.shape(y), Init::Normal { mean: 0.0, std: 1.0 }, seed ^ 0x5eed)?;
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("add", vec![normal(&[3, 4], 1)?, normal(&[3, 4], 2)?], Box::new(move |g, v| { let y = g.add(v[0], v[1])?; weighted(g, y, seed) })),
        ("sub", vec![normal(&[3, 4], 3)?, normal(&[3, 4], 4)?], Box::new(move |g, v| { let y = g.sub(v[0], v[1])?; weighted(g, y, seed) })),
        ("mul", vec![normal(&[3, 4], 5)?, normal(&[3, 4], 6)?], Box::new(move |g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y, seed) })),
        ("scale", vec![normal(&[5], 7)?], Box::new(move |g, v| { let y = g.scale(v[0], -1.7)?; weighted(g, y, seed) })),
        ("add_bias", vec![normal(&[2, 3, 4], 8)?, normal(&[4], 9)?], Box::new(move |g, v| { let y = g.add_bias(v[0], v[1])?; weighted(g, y, seed) })),
        ("matmul", vec![normal(&[2, 3, 4], 10)?, normal(&[4, 5], 11)?], Box::new(move |g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y, seed) })),
        ("matmul_nt", vec![normal(&[3, 4], 12)?, normal(&[6, 4], 13)?], Box::new(move |g, v| { let y = g.matmul_nt(v[0], v[1])?; weighted(g, y, seed) })),
        ("bmm", vec![normal(&[2, 3, 4], 14)?, normal(&[2, 4, 2], 15)?], Box::new(move |g, v| { let y = g.bmm(v[0], v[1], false)?; weighted(g, y, seed) })),
        ("bmm_nt", vec![normal(&[2, 3, 4], 16)?, normal(&[2, 5, 4], 17)?], Box::new(move |g, v| { let y = g.bmm(v[0], v[1], true)?; weighted(g, y, seed) })),
        ("relu", vec![away_from_zero(normal(&[4, 5], 18)?)?], Box::new(move |g, v| { let y = g.relu(v[0])?; weighted(g, y, seed) })),
        ("gelu", vec![normal(&[4, 5], 19)?], Box::new(move |g, v| { let y = g.gelu(v[0])?; weighted(g, y, seed) })),
        ("softmax", vec![normal(&[3, 6], 20)?], Box::new(move |g, v| { let y = g.softmax(v[0])?; weighted(g, y, seed) })),
        ("causal_softmax", vec![normal(&[2, 4, 4], 21)?], Box::new(move |g, v| { let y = g.causal_softmax(v[0])?; weighted(g, y, seed) })),
        ("layer_norm", vec![normal(&[3, 8], 22)?, normal(&[8], 23)?, normal(&[8], 24)?], Box::new(move |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(g, y, seed) })),
        ("embedding", vec![normal(&[6, 3], 25)?], Box::new(move |g, v| { let y = g.embedding(v[0], &[1, 4, 1, 5])?; weighted(g, y, seed) })),
        ("cross_entropy", vec![normal(&[4, 5], 26)?], Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]))),
        ("reshape", vec![normal(&[2, 6], 27)?], Box::new(move |g, v| { let y = g.reshape(v[0], &[3, 4])?; weighted(g, y, seed) })),
        ("permute", vec![normal(&[2, 3, 4], 28)?], Box::new(move |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; weighted(g, y, seed) })),
        ("narrow_last", vec![normal(&[3, 6], 29)?], Box::new(move |g, v| { let y = g.narrow_last(v[0], 2, 3)?; weighted(g, y, seed) })),
        ("concat_last", vec![normal(&[3, 2], 30)?, normal(&[3, 4], 31)?], Box::new(move |g, v| { let y = g.concat_last(v[0], v[1])?; weighted(g, y, seed) })),
        ("select_rows", vec![normal(&[2, 3, 4], 32)?], Box::new(move |g, v| { let y = g.select_rows(v[0], &[5, 0, 5])?; weighted(g, y, seed) })),
        ("sum", vec![normal(&[3, 3], 33)?], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![normal(&[3, 3], 34)?], Box::new(|g, v| g.mean(v[0]))),
    ];
    cases
        .into_iter()
        .map(|(name, params, build)| Ok((name, grad_check(|g, v| build(g, v), &params, cfg)?)))
        .collect()
}
