//! Consensus equilibrium engine: weighted averaging `G`, the Mann iteration
//! on `(2G - I)(2F - I)`, and the full multi-look reconstruction loop.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{EmAgent, EmParams, ProxKind};
use crate::error::{Error, Result};
use crate::forward::{back_project_init, ForwardOperator};
use crate::prior::PriorAgent;
use crate::volume::{ComplexVolume, RealVolume};

/// A component of the stacked operator `F`.
pub trait Agent: Send {
    /// Output at `w` for outer iteration `k >= 1`; may advance internal state.
    fn apply(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume>;

    /// Output at `w` without advancing internal state.
    fn evaluate(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        self.apply(w, iteration)
    }
}

impl Agent for EmAgent {
    fn apply(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        self.step(w, iteration)
    }

    fn evaluate(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        EmAgent::evaluate(self, w, iteration)
    }
}

impl Agent for PriorAgent {
    fn apply(&mut self, w: &RealVolume, _iteration: usize) -> Result<RealVolume> {
        self.denoise(w)
    }
}

impl Agent for Box<dyn Agent> {
    fn apply(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        (**self).apply(w, iteration)
    }

    fn evaluate(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        (**self).evaluate(w, iteration)
    }
}

/// Stateless agent from a closure.
pub struct FnAgent<F>(pub F);

impl<F> Agent for FnAgent<F>
where
    F: FnMut(&RealVolume) -> Result<RealVolume> + Send,
{
    fn apply(&mut self, w: &RealVolume, _iteration: usize) -> Result<RealVolume> {
        (self.0)(w)
    }
}

/// Wraps an agent and clamps its output at zero.
pub struct NonNegative<A>(pub A);

impl<A: Agent> Agent for NonNegative<A> {
    fn apply(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        Ok(self.0.apply(w, iteration)?.map(|x| x.max(0.0)))
    }

    fn evaluate(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        Ok(self.0.evaluate(w, iteration)?.map(|x| x.max(0.0)))
    }
}

/// Weights `1/(2L)` for each of `L` data agents and `1/2` for the prior.
pub fn default_weights(looks: usize) -> Result<Vec<f64>> {
    if looks == 0 {
        return Err(Error::invalid(
            "looks",
            "the engine needs at least one data agent",
        ));
    }
    let mut w = vec![0.5 / looks as f64; looks];
    w.push(0.5);
    Ok(w)
}

/// Stacked consensus state, one component per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub w: Vec<RealVolume>,
    pub r: Vec<RealVolume>,
    pub weights: Vec<f64>,
}

impl StackedState {
    /// `w = r = ` copies of `init`, for `L` data agents plus the prior.
    pub fn replicated(init: &RealVolume, looks: usize) -> Result<Self> {
        let weights = default_weights(looks)?;
        let w = vec![init.clone(); looks + 1];
        Ok(StackedState {
            r: w.clone(),
            w,
            weights,
        })
    }

    pub fn new(w: Vec<RealVolume>, weights: Vec<f64>) -> Result<Self> {
        let state = StackedState {
            r: w.clone(),
            w,
            weights,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k < 2 {
            return Err(Error::invalid(
                "agents",
                format!("need at least 2 agents, got {k}"),
            ));
        }
        if self.w.len() != k || self.r.len() != k {
            return Err(Error::dims(
                format!("{k} components"),
                format!("w: {}, r: {}", self.w.len(), self.r.len()),
            ));
        }
        if self.weights.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("weights", "must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "weights",
                format!("sum to {total}, expected 1"),
            ));
        }
        let d = self.w[0].dims();
        for v in self.w.iter().chain(&self.r) {
            d.check(&v.dims())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `sum_j weights_j v_j`, accumulated in component order.
pub fn weighted_average(vols: &[RealVolume], weights: &[f64]) -> Result<RealVolume> {
    if vols.is_empty() || vols.len() != weights.len() {
        return Err(Error::dims(
            format!("{} weights", weights.len()),
            format!("{} volumes", vols.len()),
        ));
    }
    let d = vols[0].dims();
    for v in vols {
        d.check(&v.dims())?;
    }
    let data = (0..d.len())
        .into_par_iter()
        .map(|i| {
            vols.iter()
                .zip(weights)
                .fold(0.0, |acc, (v, w)| acc + w * v[i])
        })
        .collect();
    RealVolume::from_vec(d, data)
}

/// Consensus average `w_bar` of the state's `w` components.
pub fn average_agents(state: &StackedState) -> Result<RealVolume> {
    state.validate()?;
    weighted_average(&state.w, &state.weights)
}

fn label(j: usize, count: usize) -> String {
    if j + 1 == count {
        "prior".to_string()
    } else {
        format!("look {j}")
    }
}

/// Applies every agent to its component. Data agents run concurrently; the
/// last (prior) agent runs after them.
fn apply_all(
    agents: &mut [Box<dyn Agent>],
    w: &[RealVolume],
    iteration: usize,
    advance: bool,
) -> Result<Vec<RealVolume>> {
    let count = agents.len();
    if w.len() != count {
        return Err(Error::dims(
            format!("{count} components"),
            format!("{} agents", w.len()),
        ));
    }
    let run = |j: usize, agent: &mut Box<dyn Agent>| {
        let out = if advance {
            agent.apply(&w[j], iteration)
        } else {
            agent.evaluate(&w[j], iteration)
        };
        out.map_err(|e| Error::Agent {
            agent: label(j, count),
            iteration,
            source: Box::new(e),
        })
        .and_then(|r| w[j].dims().check(&r.dims()).map(|_| r))
    };
    let (data, prior) = agents.split_at_mut(count - 1);
    let mut out: Vec<RealVolume> = data
        .par_iter_mut()
        .enumerate()
        .map(|(j, a)| run(j, a))
        .collect::<Result<_>>()?;
    out.push(run(count - 1, &mut prior[0])?);
    Ok(out)
}

/// One Mann step: `r = F(w)`, `x = 2r - w`, `w <- w + 2 rho (G(x) - r)`.
pub fn mace_iterate(
    state: &StackedState,
    agents: &mut [Box<dyn Agent>],
    rho: f64,
    iteration: usize,
) -> Result<StackedState> {
    state.validate()?;
    check_rho(rho)?;
    if agents.len() != state.len() {
        return Err(Error::dims(format!("{} agents", state.len()), agents.len()));
    }
    let r = apply_all(agents, &state.w, iteration, true)?;
    Ok(consensus_update(state, r, rho))
}

fn consensus_update(state: &StackedState, r: Vec<RealVolume>, rho: f64) -> StackedState {
    let x: Vec<RealVolume> = r
        .iter()
        .zip(&state.w)
        .map(|(r, w)| r.zip_map(w, |r, w| 2.0 * r - w).expect("shared dims"))
        .collect();
    let x_bar = weighted_average(&x, &state.weights).expect("shared dims");
    let w = state
        .w
        .par_iter()
        .zip(r.par_iter())
        .map(|(w, r)| {
            let d = w.dims();
            RealVolume::from_fn(d, |i| w[i] + 2.0 * rho * (x_bar[i] - r[i]))
        })
        .collect();
    StackedState {
        w,
        r,
        weights: state.weights.clone(),
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("rho", format!("{rho} not in (0, 1)")));
    }
    Ok(())
}

/// `||F - G(w)|| / ||G(w)||` over the stacked vector, where `F` holds the
/// agent outputs for the components of `w`.
pub fn relative_consensus_error(f: &[RealVolume], state: &StackedState) -> Result<f64> {
    let w_bar = weighted_average(&state.w, &state.weights)?;
    let denom = w_bar.norm_sqr() * f.len() as f64;
    if denom == 0.0 {
        return Err(Error::invalid("convergence error", "G(w) vanishes"));
    }
    let mut num = 0.0;
    for v in f {
        num += v.distance(&w_bar)?.powi(2);
    }
    Ok((num / denom).sqrt())
}

/// Convergence error with all agents evaluated at `w` without advancing them.
pub fn convergence_error(
    state: &StackedState,
    agents: &mut [Box<dyn Agent>],
    iteration: usize,
) -> Result<f64> {
    state.validate()?;
    let f = apply_all(agents, &state.w, iteration, false)?;
    relative_consensus_error(&f, state)
}

/// Mean over looks of the relative residual of the conditional-mean equation.
pub fn mu_residual(agents: &[EmAgent]) -> Result<f64> {
    if agents.is_empty() {
        return Err(Error::invalid("looks", "at least one look is required"));
    }
    let total: f64 = agents
        .iter()
        .map(EmAgent::mu_residual)
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / agents.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub rho: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub clamp_negative: bool,
    /// Stop once the convergence error drops below `tol`.
    pub early_stop: bool,
    /// Proximal map used by the data agents.
    pub data_prox: ProxKind,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            rho: 0.5,
            max_iters: 250,
            tol: 1e-3,
            clamp_negative: true,
            early_stop: false,
            data_prox: ProxKind::Quadratic,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if self.max_iters == 0 {
            return Err(Error::invalid("engine.max_iters", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(
                "engine.tol",
                format!("{} must be > 0", self.tol),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub convergence_error: f64,
    pub mu_residual: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsTrace {
    pub rows: Vec<TraceRow>,
}

impl DiagnosticsTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reconstructs the reflectivity from `ys` with one data agent per look and
/// the given prior agent, returning `w_bar` and the per-iteration trace.
pub fn run_clamp_with(
    ys: &[ComplexVolume],
    op: Arc<ForwardOperator>,
    prior: Box<dyn Agent>,
    em: &EmParams,
    cfg: &EngineConfig,
) -> Result<(RealVolume, DiagnosticsTrace)> {
    cfg.validate()?;
    em.validate()?;
    let (mus, r0) = back_project_init(ys, &op)?;
    let looks = ys.len();
    let mut data: Vec<EmAgent> = ys
        .iter()
        .zip(mus)
        .map(|(y, mu)| EmAgent::new(y.clone(), mu, r0.clone(), op.clone(), *em, cfg.data_prox))
        .collect::<Result<_>>()?;
    let mut prior: Box<dyn Agent> = if cfg.clamp_negative {
        Box::new(NonNegative(prior))
    } else {
        prior
    };
    let mut state = StackedState::replicated(&r0, looks)?;
    let mut trace = DiagnosticsTrace::default();
    let start = Instant::now();

    for k in 1..=cfg.max_iters {
        let mut r: Vec<RealVolume> = data
            .par_iter_mut()
            .zip(state.w[..looks].par_iter())
            .enumerate()
            .map(|(l, (agent, w))| {
                agent.step(w, k).map_err(|e| Error::Agent {
                    agent: label(l, looks + 1),
                    iteration: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let p = prior.apply(&state.w[looks], k).map_err(|e| Error::Agent {
            agent: "prior".into(),
            iteration: k,
            source: Box::new(e),
        })?;
        state.w[looks].dims().check(&p.dims())?;
        r.push(p);
        for (j, v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    iteration: k,
                    context: format!("{} output", label(j, looks + 1)),
                });
            }
        }
        let err = relative_consensus_error(&r, &state)?;
        let mu_res = mu_residual(&data)?;
        state = consensus_update(&state, r, cfg.rho);
        if state.w.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                iteration: k,
                context: "consensus update".into(),
            });
        }
        let row = TraceRow {
            iteration: k,
            convergence_error: err,
            mu_residual: mu_res,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::debug!("iteration {k}: error {err:.3e}, mu residual {mu_res:.3e}");
        if k % 25 == 0 || k == 1 {
            log::info!(
                "iteration {k}/{}: convergence error {err:.3e}",
                cfg.max_iters
            );
        }
        trace.rows.push(row);
        if cfg.early_stop && err < cfg.tol {
            log::info!(
                "converged at iteration {k} (error {err:.3e} < {:.1e})",
                cfg.tol
            );
            break;
        }
    }
    Ok((average_agents(&state)?, trace))
}

/// [`run_clamp_with`] using a prior agent built from its configuration.
pub fn run_clamp(
    ys: &[ComplexVolume],
    op: &ForwardOperator,
    prior: PriorAgent,
    em: &EmParams,
    cfg: &EngineConfig,
) -> Result<(RealVolume, DiagnosticsTrace)> {
    run_clamp_with(ys, Arc::new(op.clone()), Box::new(prior), em, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(d: Dims, rng: &mut ChaCha8Rng) -> RealVolume {
        RealVolume::from_fn(d, |_| rng.random_range(0.0..2.0))
    }

    fn identity() -> Box<dyn Agent> {
        Box::new(FnAgent(|w: &RealVolume| Ok(w.clone())))
    }

    #[test]
    fn averaging_examples() {
        let d = Dims::new(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(d, &mut rng);
        let s = StackedState::replicated(&x, 3).unwrap();
        assert!(average_agents(&s).unwrap().distance(&x).unwrap() < 1e-15);

        let a = random(d, &mut rng);
        let b = random(d, &mut rng);
        let s = StackedState::new(vec![a.clone(), b.clone()], default_weights(1).unwrap()).unwrap();
        let mean = average_agents(&s).unwrap();
        for i in 0..d.len() {
            assert!((mean[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }

        let vols: Vec<RealVolume> = (0..5).map(|_| random(d, &mut rng)).collect();
        let s = StackedState::new(vols.clone(), default_weights(4).unwrap()).unwrap();
        let avg = average_agents(&s).unwrap();
        for i in 0..d.len() {
            let direct =
                (vols[0][i] + vols[1][i] + vols[2][i] + vols[3][i]) / 8.0 + vols[4][i] / 2.0;
            assert!((avg[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_states() {
        let d = Dims::new(2, 2, 2).unwrap();
        let x = RealVolume::zeros(d);
        assert!(default_weights(0).is_err());
        assert!(StackedState::new(vec![x.clone(), x.clone()], vec![0.5, 0.6]).is_err());
        assert!(StackedState::new(vec![x.clone()], vec![1.0]).is_err());
        let other = RealVolume::zeros(Dims::new(2, 2, 3).unwrap());
        assert!(StackedState::new(vec![x.clone(), other], vec![0.5, 0.5]).is_err());
        let s = StackedState::replicated(&x, 1).unwrap();
        let mut agents = vec![identity(), identity()];
        assert!(mace_iterate(&s, &mut agents, 1.0, 1).is_err());
        assert!(mace_iterate(&s, &mut agents[..1], 0.5, 1).is_err());
    }

    #[test]
    fn identity_agents_preserve_the_average() {
        let d = Dims::new(4, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<RealVolume> = (0..4).map(|_| random(d, &mut rng)).collect();
        let mut s = StackedState::new(w, default_weights(3).unwrap()).unwrap();
        let start = average_agents(&s).unwrap();
        let mut agents: Vec<Box<dyn Agent>> = (0..4).map(|_| identity()).collect();
        for k in 1..=5 {
            let before = s.w.clone();
            s = mace_iterate(&s, &mut agents, 0.5, k).unwrap();
            // With identity agents x = w, so w <- w + 2 rho (G(w) - w), which
            // is the average itself for rho = 1/2.
            let bar = weighted_average(&before, &s.weights).unwrap();
            for new in &s.w {
                assert!(new.distance(&bar).unwrap() < 1e-12);
            }
            assert!(average_agents(&s).unwrap().distance(&start).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_is_preserved() {
        let d = Dims::new(3, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = random(d, &mut rng);
        // Agents that map everything to the same volume: F(w) = G(w) once
        // every component equals it.
        let mut agents: Vec<Box<dyn Agent>> = (0..3)
            .map(|_| {
                let t = target.clone();
                Box::new(FnAgent(move |_: &RealVolume| Ok(t.clone()))) as Box<dyn Agent>
            })
            .collect();
        let s = StackedState::replicated(&target, 2).unwrap();
        let next = mace_iterate(&s, &mut agents, 0.5, 1).unwrap();
        for (a, b) in next.w.iter().zip(&s.w) {
            assert!(a.distance(b).unwrap() < 1e-10);
        }
        assert!(convergence_error(&s, &mut agents, 1).unwrap() < 1e-10);
    }

    #[test]
    fn consensus_identity_at_half_rho() {
        let d = Dims::new(3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<RealVolume> = (0..3).map(|_| random(d, &mut rng)).collect();
        let mut s = StackedState::new(w, default_weights(2).unwrap()).unwrap();
        let mut agents: Vec<Box<dyn Agent>> = vec![
            Box::new(FnAgent(|w: &RealVolume| Ok(w.map(|x| 0.5 * x + 0.1)))),
            Box::new(FnAgent(|w: &RealVolume| Ok(w.map(|x| x.sqrt())))),
            Box::new(FnAgent(|w: &RealVolume| Ok(w.map(|x| x.max(0.2))))),
        ];
        for k in 1..=10 {
            s = mace_iterate(&s, &mut agents, 0.5, k).unwrap();
            let gw = average_agents(&s).unwrap();
            let gr = weighted_average(&s.r, &s.weights).unwrap();
            assert!(gw.distance(&gr).unwrap() < 1e-10);
        }
    }

    #[test]
    fn convergence_error_matches_recomputation() {
        let d = Dims::new(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<RealVolume> = (0..3).map(|_| random(d, &mut rng)).collect();
        let s = StackedState::new(w.clone(), default_weights(2).unwrap()).unwrap();
        let mut agents: Vec<Box<dyn Agent>> = vec![
            Box::new(FnAgent(|w: &RealVolume| Ok(w.scaled(0.5)))),
            identity(),
            Box::new(FnAgent(|w: &RealVolume| Ok(w.map(|x| x * x)))),
        ];
        let got = convergence_error(&s, &mut agents, 1).unwrap();
        let f = [w[0].scaled(0.5), w[1].clone(), w[2].map(|x| x * x)];
        let mut num = 0.0;
        let mut den = 0.0;
        for fj in &f {
            for i in 0..d.len() {
                let g = 0.25 * w[0][i] + 0.25 * w[1][i] + 0.5 * w[2][i];
                num += (fj[i] - g).powi(2);
                den += g * g;
            }
        }
        assert!((got - (num / den).sqrt()).abs() < 1e-12);
        let zero = StackedState::replicated(&RealVolume::zeros(d), 2).unwrap();
        assert!(convergence_error(&zero, &mut agents, 1).is_err());
    }

    #[test]
    fn agent_failures_carry_context() {
        let d = Dims::new(2, 2, 2).unwrap();
        let s = StackedState::replicated(&RealVolume::filled(d, 1.0), 2).unwrap();
        let mut agents: Vec<Box<dyn Agent>> = vec![
            identity(),
            Box::new(FnAgent(|_: &RealVolume| Err(Error::Sidecar("boom".into())))),
            identity(),
        ];
        let err = mace_iterate(&s, &mut agents, 0.5, 7).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("look 1") && msg.contains("iteration 7"),
            "{msg}"
        );
    }
}
