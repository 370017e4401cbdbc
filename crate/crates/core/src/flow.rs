//! Conditional flow matching on the linear (optimal-transport) path, the
//! infilling objective with condition dropout, guidance, and fixed-grid ODE
//! sampling.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::frames::FrameMatrix;
use crate::numerics::{Real, Tape, Var};
use crate::{Error, Result};

pub const P_DROP_TEXT: f64 = 0.2;
pub const P_DROP_CTX: f64 = 0.3;
pub const MIN_MASK_RATIO: f64 = 0.7;

/// One point on the path from noise `x0` to data `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T = f32> {
    pub x0: FrameMatrix<T>,
    pub x1: FrameMatrix<T>,
    pub t: f64,
    pub xt: FrameMatrix<T>,
    pub target_velocity: FrameMatrix<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(x0: FrameMatrix<T>, x1: FrameMatrix<T>, t: f64) -> Result<Self> {
        if !x0.same_shape(&x1) {
            return Err(Error::Dimension(format!(
                "noise {}x{} vs data {}x{}",
                x0.rows(),
                x0.cols(),
                x1.rows(),
                x1.cols()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let tt = T::from_f64_lossy(t);
        let xt = x1.lerp_with(tt, &x0, T::one() - tt);
        let target_velocity = x1.lerp_with(T::one(), &x0, -T::one());
        Ok(Self { x0, x1, t, xt, target_velocity })
    }
}

pub fn standard_normal<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> FrameMatrix<T> {
    FrameMatrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1)` and places the sample on the path.
pub fn make_flow_sample<T: Real>(x1: &FrameMatrix<T>, rng: &mut impl Rng) -> FlowSample<T> {
    let x0 = standard_normal(x1.rows(), x1.cols(), rng);
    let t = rng.random::<f64>();
    FlowSample::new(x0, x1.clone(), t).expect("shapes agree by construction")
}

/// Mean squared velocity error over the frames selected by `m`, normalized by
/// `|m|·D`. Unselected frames carry no loss and no gradient.
pub fn cfm_infill_loss<T: Real>(tape: &mut Tape<T>, pred: Var, sample: &FlowSample<T>, m: &[bool]) -> Result<Var> {
    let target = &sample.target_velocity;
    if tape.shape(pred) != [target.rows(), target.cols()] {
        return Err(Error::Dimension(format!(
            "velocity prediction {:?} vs target {}x{}",
            tape.shape(pred),
            target.rows(),
            target.cols()
        )));
    }
    Ok(tape.masked_mse(pred, target.data(), m)?)
}

/// Frames to generate (`mask[i]`) plus the conditioning that remains visible.
#[derive(Clone, Debug, PartialEq)]
pub struct InfillBatch<T = f32> {
    pub x1: FrameMatrix<T>,
    pub mask: Vec<bool>,
    /// `x1` with the masked frames zeroed.
    pub ctx: FrameMatrix<T>,
    /// Empty means the null text condition.
    pub text: Vec<u32>,
    pub t: f64,
    pub drop_text: bool,
    pub drop_ctx: bool,
}

impl<T: Real> InfillBatch<T> {
    pub fn new(x1: FrameMatrix<T>, mask: Vec<bool>, text: Vec<u32>, t: f64) -> Result<Self> {
        if mask.len() != x1.rows() {
            return Err(Error::Dimension(format!("{} mask flags for {} frames", mask.len(), x1.rows())));
        }
        let ctx = masked_context(&x1, &mask);
        Ok(Self { x1, mask, ctx, text, t, drop_text: false, drop_ctx: false })
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `(1 − m) ⊙ x1`.
pub fn masked_context<T: Real>(x1: &FrameMatrix<T>, mask: &[bool]) -> FrameMatrix<T> {
    FrameMatrix::from_fn(x1.rows(), x1.cols(), |i, j| if mask[i] { T::zero() } else { x1.get(i, j) })
}

/// A single contiguous span covering a uniform fraction in `[0.7, 1]` of the
/// frames, at a uniform offset.
pub fn sample_span_mask(frames: usize, rng: &mut impl Rng) -> Vec<bool> {
    if frames == 0 {
        return Vec::new();
    }
    let ratio = rng.random_range(MIN_MASK_RATIO..=1.0);
    let len = ((ratio * frames as f64).ceil() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    (0..frames).map(|i| (start..start + len).contains(&i)).collect()
}

/// Independently drops the text (probability `p_text`) and the context
/// (probability `p_ctx`). Both draws are always consumed.
pub fn apply_cfg_dropout<T: Real>(
    mut batch: InfillBatch<T>,
    rng: &mut impl Rng,
    p_text: f64,
    p_ctx: f64,
) -> Result<InfillBatch<T>> {
    for (name, p) in [("p_text", p_text), ("p_ctx", p_ctx)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("{name} = {p} is not a probability")));
        }
    }
    let u_text = rng.random::<f64>();
    let u_ctx = rng.random::<f64>();
    if u_text < p_text {
        batch.text.clear();
        batch.drop_text = true;
    }
    if u_ctx < p_ctx {
        batch.ctx.data_mut().iter_mut().for_each(|v| *v = T::zero());
        batch.drop_ctx = true;
    }
    Ok(batch)
}

/// Anything that predicts a velocity for every frame of `xt`.
pub trait VelocityField<T: Real> {
    fn velocity(&self, xt: &FrameMatrix<T>, ctx: &FrameMatrix<T>, text: &[u32], t: f64) -> Result<FrameMatrix<T>>;
}

impl<T: Real, F> VelocityField<T> for F
where
    F: Fn(&FrameMatrix<T>, &FrameMatrix<T>, &[u32], f64) -> Result<FrameMatrix<T>>,
{
    fn velocity(&self, xt: &FrameMatrix<T>, ctx: &FrameMatrix<T>, text: &[u32], t: f64) -> Result<FrameMatrix<T>> {
        self(xt, ctx, text, t)
    }
}

/// `u_uncond + w·(u_cond − u_uncond)`, where the unconditional pass sees
/// neither text nor context. `w = 1` and `w = 0` skip the unused pass and
/// return that pass's output unchanged.
pub fn guided_velocity<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    xt: &FrameMatrix<T>,
    ctx: &FrameMatrix<T>,
    text: &[u32],
    t: f64,
    w: f64,
) -> Result<FrameMatrix<T>> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Domain(format!("guidance weight {w} must be finite and non-negative")));
    }
    let uncond = |field: &F| field.velocity(xt, &FrameMatrix::zeros(ctx.rows(), ctx.cols()), &[], t);
    if w == 1.0 {
        return field.velocity(xt, ctx, text, t);
    }
    if w == 0.0 {
        return uncond(field);
    }
    let uc = field.velocity(xt, ctx, text, t)?;
    let uu = uncond(field)?;
    let w = T::from_f64_lossy(w);
    Ok(FrameMatrix::from_fn(uu.rows(), uu.cols(), |i, j| {
        let u = uu.get(i, j);
        u + w * (uc.get(i, j) - u)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Euler,
    Midpoint,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "midpoint" => Ok(Scheme::Midpoint),
            other => Err(format!("unknown ODE scheme `{other}` (expected euler or midpoint)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub cfg_weight: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { nfe: 32, cfg_weight: 2.0, scheme: Scheme::Euler, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::Config(format!("cfg weight {} must be finite and non-negative", self.cfg_weight)));
        }
        Ok(())
    }
}

/// Integrates `dx/dt = f(x, t)` from 0 to 1 on a uniform grid of `steps`
/// intervals.
pub fn integrate<T: Real>(
    x0: FrameMatrix<T>,
    steps: usize,
    scheme: Scheme,
    mut f: impl FnMut(&FrameMatrix<T>, f64) -> Result<FrameMatrix<T>>,
) -> Result<FrameMatrix<T>> {
    if steps == 0 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    let h = 1.0 / steps as f64;
    let ht = T::from_f64_lossy(h);
    let half = T::from_f64_lossy(h / 2.0);
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * h;
        let u = match scheme {
            Scheme::Euler => f(&x, t)?,
            Scheme::Midpoint => {
                let u0 = f(&x, t)?;
                let mid = x.lerp_with(T::one(), &u0, half);
                f(&mid, t + h / 2.0)?
            }
        };
        x = x.lerp_with(T::one(), &u, ht);
    }
    Ok(x)
}

/// Starts from seeded standard normal noise with `ctx`'s shape and follows the
/// guided velocity field to `t = 1`.
pub fn ode_sample<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    ctx: &FrameMatrix<T>,
    text: &[u32],
    cfg: &SamplerConfig,
) -> Result<FrameMatrix<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = standard_normal(ctx.rows(), ctx.cols(), &mut rng);
    integrate(x0, cfg.nfe, cfg.scheme, |x, t| guided_velocity(field, x, ctx, text, t, cfg.cfg_weight))
}

/// Energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between the row sets of two
/// sample matrices (V-statistic form).
pub fn energy_distance(a: &FrameMatrix<f64>, b: &FrameMatrix<f64>) -> f64 {
    fn mean_dist(a: &FrameMatrix<f64>, b: &FrameMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            let x = a.row(i);
            for j in 0..b.rows() {
                s += x.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            }
        }
        s / (a.rows() * b.rows()) as f64
    }
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}
