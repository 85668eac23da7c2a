//! Loss terms on the SVD factors and total-loss assembly.
//!
//! Counting and threshold quantities (the sort-loss normalizers, the kept
//! rank `τ`, and the norm dividing the compression loss) are read from the
//! current values and enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{FactorVars, FactorizedParam};
use crate::pruning::compute_tau;
use crate::tensor::{Precision, Tensor};

/// Which regularizer accompanies the application loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// Structure (orthogonality + sorting) and compression losses.
    Proposed,
    None,
    L1,
    L2,
    Funnel,
}

impl RegMode {
    pub const ALL: [RegMode; 5] = [
        RegMode::None,
        RegMode::L1,
        RegMode::L2,
        RegMode::Funnel,
        RegMode::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegMode::Proposed => "proposed",
            RegMode::None => "none",
            RegMode::L1 => "l1",
            RegMode::L2 => "l2",
            RegMode::Funnel => "funnel",
        }
    }

    pub fn is_ablation(self) -> bool {
        matches!(self, RegMode::L1 | RegMode::L2 | RegMode::Funnel)
    }
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularization mode `{s}`")))
    }
}

/// Loss weights and pruning threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_str: f64,
    pub lambda_comp: f64,
    pub mu_orth: f64,
    pub mu_sort: f64,
    /// Relative pruning threshold, in `(0, 1)`.
    pub epsilon: f64,
    pub mode: RegMode,
    /// Weight of the ablation regularizer (l1 / l2 / funnel).
    pub lambda_reg: f64,
    /// Funnel stabilizer.
    pub delta: f64,
}

/// Funnel stabilizer used when none is configured.
pub const DEFAULT_FUNNEL_DELTA: f64 = 0.01;

impl Default for LossConfig {
    /// The CIFAR-10 / ResNet-20 hyper-parameter row.
    fn default() -> Self {
        LossConfig {
            lambda_str: 1.0,
            lambda_comp: 0.1,
            mu_orth: 1000.0,
            mu_sort: 1.0,
            epsilon: 0.1,
            mode: RegMode::Proposed,
            lambda_reg: 0.1,
            delta: DEFAULT_FUNNEL_DELTA,
        }
    }
}

/// Named hyper-parameter rows: `(name, lambda_comp, epsilon)`.
pub const PRESETS: [(&str, f64, f64); 5] = [
    ("cifar10-resnet20", 0.1, 0.1),
    ("cifar10-resnet32", 0.5, 0.001),
    ("cifar100-resnet20", 0.1, 0.1),
    ("cifar100-resnet32", 1.0, 0.001),
    ("imagenet-resnet18", 0.5, 0.001),
];

/// Weight and threshold used for the l1 / l2 / funnel comparison runs.
pub const ABLATION_LAMBDA_REG: f64 = 0.1;
pub const ABLATION_EPSILON: f64 = 0.001;

impl LossConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, lambda_comp, epsilon) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Ok(LossConfig {
            lambda_comp: *lambda_comp,
            epsilon: *epsilon,
            ..LossConfig::default()
        })
    }

    /// Configuration of one comparison run derived from `self` (the proposed-mode settings).
    pub fn for_ablation(&self, mode: RegMode) -> Self {
        match mode {
            RegMode::Proposed => LossConfig { mode, ..*self },
            _ => LossConfig {
                mode,
                lambda_reg: ABLATION_LAMBDA_REG,
                epsilon: ABLATION_EPSILON,
                ..*self
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_str", self.lambda_str),
            ("lambda_comp", self.lambda_comp),
            ("mu_orth", self.mu_orth),
            ("mu_sort", self.mu_sort),
            ("lambda_reg", self.lambda_reg),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.mode == RegMode::Funnel && !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("funnel delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Value of every loss component for one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub app: f64,
    pub orth: f64,
    pub sort: f64,
    pub comp: f64,
    pub reg: f64,
    pub total: f64,
}

/// `χ(a) = 1/a` for `a > 0`, else 0.
pub fn chi(a: usize) -> f64 {
    if a > 0 {
        1.0 / a as f64
    } else {
        0.0
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn mean_over_layers(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let l = terms.len();
    let mut acc = zero(g);
    for t in terms {
        acc = g.add(acc, t)?;
    }
    Ok(if l > 0 { g.scale(acc, 1.0 / l as f64) } else { acc })
}

fn gram_deviation(g: &mut Graph, m: Var) -> Result<Var> {
    let r = g.value(m).shape()[1];
    let mt = g.transpose(m)?;
    let gram = g.matmul(mt, m)?;
    let eye = g.constant(Tensor::eye(r));
    let dev = g.sub(gram, eye)?;
    Ok(g.norm(dev))
}

/// `(1/L) Σ_l (‖UᵀU − I‖_F + ‖VᵀV − I‖_F) / r_l²`.
pub fn orth_loss(g: &mut Graph, layers: &[FactorVars]) -> Result<Var> {
    let mut terms = Vec::with_capacity(layers.len());
    for p in layers {
        let r = g.value(p.sigma).len();
        let du = gram_deviation(g, p.u)?;
        let dv = gram_deviation(g, p.v)?;
        let s = g.add(du, dv)?;
        terms.push(g.scale(s, 1.0 / (r * r) as f64));
    }
    mean_over_layers(g, terms)
}

/// Count of ascents `σ_j > σ_{j-1}` and of negative entries.
pub fn sort_violations(sigma: &[f64]) -> (usize, usize) {
    let gamma = sigma.windows(2).filter(|w| w[1] > w[0]).count();
    let eta = sigma.iter().filter(|&&s| s < 0.0).count();
    (gamma, eta)
}

/// Sorting loss: ascent penalty weighted by `χ(γ)` plus negativity penalty over
/// entries `1..r-1` weighted by `χ(η)`.
pub fn sort_loss(g: &mut Graph, layers: &[FactorVars]) -> Result<Var> {
    let mut terms = Vec::with_capacity(layers.len());
    for p in layers {
        let sigma = g.value(p.sigma).data().to_vec();
        let r = sigma.len();
        let (gamma, eta) = sort_violations(&sigma);
        let mut term = zero(g);
        if r >= 2 {
            let head = g.slice(p.sigma, 0, r - 1)?;
            if gamma > 0 {
                let next = g.slice(p.sigma, 1, r - 1)?;
                let diff = g.sub(next, head)?;
                let asc = g.relu(diff);
                let s = g.sum(asc);
                let s = g.scale(s, chi(gamma));
                term = g.add(term, s)?;
            }
            if eta > 0 {
                let neg = g.scale(head, -1.0);
                let neg = g.relu(neg);
                let s = g.sum(neg);
                let s = g.scale(s, chi(eta));
                term = g.add(term, s)?;
            }
        }
        terms.push(term);
    }
    mean_over_layers(g, terms)
}

/// Compression loss on the tail beyond the kept rank `τ`:
/// `(1/L) Σ_l Σ_{i>τ} |σ_i| / ((r − τ)·‖σ‖₂)`, norm detached.
pub fn comp_loss(g: &mut Graph, layers: &[FactorVars], epsilon: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(layers.len());
    for p in layers {
        let sigma = g.value(p.sigma).data().to_vec();
        let r = sigma.len();
        let tau = compute_tau(&sigma, epsilon)?;
        let norm = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        if tau == r || norm == 0.0 {
            terms.push(zero(g));
            continue;
        }
        let tail = g.slice(p.sigma, tau, r - tau)?;
        let tail = g.abs(tail);
        let s = g.sum(tail);
        terms.push(g.scale(s, 1.0 / ((r - tau) as f64 * norm)));
    }
    mean_over_layers(g, terms)
}

/// L1, L2 or funnel penalty on the singular values, each normalized by `r_l` and averaged over layers.
pub fn ablation_reg(g: &mut Graph, layers: &[FactorVars], mode: RegMode, delta: f64) -> Result<Var> {
    if !mode.is_ablation() {
        return Err(Error::Config(format!(
            "`{}` is not an ablation regularizer",
            mode.as_str()
        )));
    }
    let mut terms = Vec::with_capacity(layers.len());
    for p in layers {
        let r = g.value(p.sigma).len();
        let t = match mode {
            RegMode::L1 => {
                let a = g.abs(p.sigma);
                g.sum(a)
            }
            RegMode::L2 => g.norm(p.sigma),
            RegMode::Funnel => {
                let a = g.abs(p.sigma);
                let d = g.add_scalar(a, delta);
                let f = g.div(a, d)?;
                g.sum(f)
            }
            _ => unreachable!(),
        };
        terms.push(g.scale(t, 1.0 / r as f64));
    }
    mean_over_layers(g, terms)
}

/// Assembles the total loss on the tape and reports every component.
pub fn total_loss(g: &mut Graph, app: Var, layers: &[FactorVars], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let mut parts = LossBreakdown {
        app: g.value(app).item(),
        ..Default::default()
    };
    let total = match cfg.mode {
        RegMode::None => app,
        RegMode::Proposed => {
            let orth = orth_loss(g, layers)?;
            let sort = sort_loss(g, layers)?;
            let comp = comp_loss(g, layers, cfg.epsilon)?;
            parts.orth = g.value(orth).item();
            parts.sort = g.value(sort).item();
            parts.comp = g.value(comp).item();
            let mut total = app;
            if cfg.lambda_str != 0.0 {
                let o = g.scale(orth, cfg.mu_orth);
                let s = g.scale(sort, cfg.mu_sort);
                let structure = g.add(o, s)?;
                let structure = g.scale(structure, cfg.lambda_str);
                total = g.add(total, structure)?;
            }
            if cfg.lambda_comp != 0.0 {
                let c = g.scale(comp, cfg.lambda_comp);
                total = g.add(total, c)?;
            }
            total
        }
        mode => {
            let reg = ablation_reg(g, layers, mode, cfg.delta)?;
            parts.reg = g.value(reg).item();
            if cfg.lambda_reg != 0.0 {
                let r = g.scale(reg, cfg.lambda_reg);
                g.add(app, r)?
            } else {
                app
            }
        }
    };
    parts.total = g.value(total).item();
    Ok((total, parts))
}

/// Evaluates a loss term on plain factor values in double precision.
pub fn evaluate<F>(layers: &[&FactorizedParam], term: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[FactorVars]) -> Result<Var>,
{
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<FactorVars> = layers.iter().map(|p| p.bind(&mut g)).collect();
    let v = term(&mut g, &vars)?;
    Ok(g.value(v).item())
}
