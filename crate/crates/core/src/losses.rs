//! Knowledge-transfer losses.
//!
//! Batched losses sum over outputs and average over the batch. Losses that
//! involve input gradients take a detached input batch and the [`Tape`] the
//! student parameters live on; the input is recorded as a leaf there and the
//! student gradients are taken with `create_graph`, so the result can be
//! differentiated with respect to the student parameters.

use jacmatch_autodiff::{grad, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{Head, Network};
use crate::{Error, Result};

/// Lower clamp on softmax outputs used as denominators.
pub const PROB_EPS: f64 = 1e-8;

/// Logits plus feature-tap outputs of a model on a batch.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub logits: Tensor,
    pub taps: Vec<Tensor>,
}

/// Anything that maps a batch `(B, ..)` to logits `(B, k)`.
pub trait Model {
    fn outputs(&self, x: &Tensor) -> Result<Outputs>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.outputs(x)?.logits)
    }
}

impl<F> Model for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn outputs(&self, x: &Tensor) -> Result<Outputs> {
        Ok(Outputs {
            logits: self(x)?,
            taps: Vec::new(),
        })
    }
}

/// One head of a network evaluated with the given parameter tensors.
pub struct NetModel<'a> {
    pub net: &'a Network,
    pub params: Vec<Tensor>,
    pub head: Head,
}

impl<'a> NetModel<'a> {
    pub fn new(net: &'a Network, params: Vec<Tensor>, head: Head) -> Self {
        NetModel { net, params, head }
    }

    /// Uses the network's own parameters as constants.
    pub fn frozen(net: &'a Network, head: Head) -> Self {
        NetModel::new(net, net.param_tensors(), head)
    }
}

impl Model for NetModel<'_> {
    fn outputs(&self, x: &Tensor) -> Result<Outputs> {
        let pass = self.net.forward_with(&self.params, x)?;
        Ok(Outputs {
            logits: pass.head(self.head)?.clone(),
            taps: pass.taps,
        })
    }
}

/// One head of a network with its own parameters as constants. Holds no
/// tensors, so it can be shared across threads.
#[derive(Debug, Clone, Copy)]
pub struct FrozenNet<'a> {
    pub net: &'a Network,
    pub head: Head,
}

impl Model for FrozenNet<'_> {
    fn outputs(&self, x: &Tensor) -> Result<Outputs> {
        NetModel::frozen(self.net, self.head).outputs(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Every output.
    #[default]
    Full,
    /// The labelled class of each example.
    CorrectClass,
    /// The teacher's top class of each example.
    MaxOutput,
    /// Input gradient of the pooled attention map at the teacher's peak.
    MaxAttentionPixel,
}

/// Averaging window applied to attention maps before picking the peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolWindow {
    /// Window equal to the map side: a single pooled pixel.
    Full,
    /// Window 1.
    None,
    /// `floor(side / n)`, at least 1.
    Fraction(usize),
    Pixels(usize),
}

impl PoolWindow {
    pub fn resolve(self, side: usize) -> Result<usize> {
        let w = match self {
            PoolWindow::Full => side,
            PoolWindow::None => 1,
            PoolWindow::Fraction(n) if n > 0 => (side / n).max(1),
            PoolWindow::Fraction(_) => return Err(Error::InvalidArgument("pool fraction must be positive".into())),
            PoolWindow::Pixels(p) => p,
        };
        if w == 0 || w > side {
            return Err(Error::InvalidArgument(format!(
                "pool window {w} outside 1..={side}"
            )));
        }
        Ok(w)
    }

    pub fn label(self) -> String {
        match self {
            PoolWindow::Full => "full".into(),
            PoolWindow::None => "none".into(),
            PoolWindow::Fraction(n) => format!("s/{n}"),
            PoolWindow::Pixels(p) => format!("{p}px"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JacobianStrategy {
    pub mode: JacobianMode,
    /// Defaults to `floor(side / 5)`.
    pub pool_window: Option<PoolWindow>,
}

impl JacobianStrategy {
    pub fn full() -> Self {
        JacobianStrategy::default()
    }

    pub fn with_mode(mode: JacobianMode) -> Self {
        JacobianStrategy {
            mode,
            pool_window: None,
        }
    }

    pub fn window(&self, side: usize) -> Result<usize> {
        self.pool_window.unwrap_or(PoolWindow::Fraction(5)).resolve(side)
    }
}

fn batch_of(t: &Tensor) -> usize {
    if t.ndim() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            what: what.into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn finite(term: &str, t: Tensor) -> Result<Tensor> {
    let v = t.item();
    if v.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            value: v,
        })
    }
}

/// `Σᵢ (tᵢ - sᵢ)²`, averaged over the batch for `(B, k)` inputs.
pub fn match_activations_sq(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    check_same("matched logits", teacher, student)?;
    let b = batch_of(student);
    Ok(student.sub(teacher)?.square()?.sum()?.scale(1.0 / b as f64)?)
}

/// `-mean_b log softmax(logits)[b, label_b]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let b = batch_of(logits);
    let k = *logits.shape().last().unwrap_or(&1);
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {b} with {k} classes",
            labels.len()
        )));
    }
    let lp = logits.reshape(&[b, k])?.log_softmax(1.0)?;
    Ok(lp.select_per_row(labels)?.sum()?.scale(-1.0 / b as f64)?)
}

/// `-mean_b Σᵢ softmax(t/T)ᵢ log softmax(s/T)ᵢ` with the teacher held fixed.
pub fn soft_cross_entropy(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<Tensor> {
    check_same("matched logits", teacher, student)?;
    let b = batch_of(student);
    let t = teacher.detach().softmax(temperature)?;
    Ok(student.log_softmax(temperature)?.mul(&t)?.sum()?.scale(-1.0 / b as f64)?)
}

/// One-hot `(B, k)` targets.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * k];
    for (b, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
        }
        v[b * k + l] = 1.0;
    }
    Ok(Tensor::new(v, &[labels.len(), k])?)
}

/// Which outputs contribute to a Jacobian loss.
enum Selection {
    Columns(usize),
    PerRow(Vec<usize>),
}

impl Selection {
    fn parts(&self) -> usize {
        match self {
            Selection::Columns(k) => *k,
            Selection::PerRow(_) => 1,
        }
    }

    /// Scalar whose input gradient stacks the selected per-example rows.
    fn pick(&self, logits: &Tensor, part: usize) -> Result<Tensor> {
        let b = logits.shape()[0];
        let k = logits.numel() / b;
        let l = logits.reshape(&[b, k])?;
        Ok(match self {
            Selection::Columns(_) => l.index_select(1, &[part])?.sum()?,
            Selection::PerRow(cols) => l.select_per_row(cols)?.sum()?,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn selection(mode: JacobianMode, teacher: &Tensor, labels: Option<&[usize]>) -> Result<Selection> {
    let b = teacher.shape()[0];
    let k = teacher.numel() / b;
    Ok(match mode {
        JacobianMode::Full => Selection::Columns(k),
        JacobianMode::CorrectClass => {
            let labels = labels.ok_or_else(|| {
                Error::InvalidArgument("correct-class Jacobian strategy requires labels".into())
            })?;
            if labels.len() != b || labels.iter().any(|&l| l >= k) {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for a batch of {b} with {k} classes",
                    labels.len()
                )));
            }
            Selection::PerRow(labels.to_vec())
        }
        JacobianMode::MaxOutput => Selection::PerRow(teacher.data().chunks(k).map(argmax).collect()),
        JacobianMode::MaxAttentionPixel => {
            return Err(Error::InvalidArgument(
                "max-attention-pixel works on feature taps; use match_attention_jacobians".into(),
            ))
        }
    })
}

/// Records `x` on `tape` and runs both models on it.
fn run_both(teacher: &dyn Model, student: &dyn Model, x: &Tensor, tape: &Tape) -> Result<(Tensor, Outputs, Outputs)> {
    let xl = tape.leaf(&x.detach());
    let t = teacher.outputs(&xl)?;
    let s = student.outputs(&xl)?;
    Ok((xl, t, s))
}

/// `σ² Σ_{i∈strategy} ‖∇ₓtᵢ - ∇ₓsᵢ‖²`, averaged over the batch.
pub fn match_jacobians_sq(
    teacher: &dyn Model,
    student: &dyn Model,
    x: &Tensor,
    tape: &Tape,
    strategy: &JacobianStrategy,
    labels: Option<&[usize]>,
    sigma: f64,
) -> Result<Tensor> {
    let (xl, t, s) = run_both(teacher, student, x, tape)?;
    check_same("matched logits", &t.logits, &s.logits)?;
    let sel = selection(strategy.mode, &t.logits, labels)?;
    let b = x.shape()[0];
    let mut total: Option<Tensor> = None;
    for part in 0..sel.parts() {
        let gt = grad(&sel.pick(&t.logits, part)?, &xl, false)?;
        let gs = grad(&sel.pick(&s.logits, part)?, &xl, true)?;
        let term = gs.sub(&gt)?.square()?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("at least one selected output");
    Ok(total.scale(sigma * sigma / b as f64)?)
}

/// Per-example input gradients `(B, D)` of `probs[:, i]`.
fn prob_grad(probs: &Tensor, i: usize, xl: &Tensor, create_graph: bool) -> Result<Tensor> {
    let b = xl.shape()[0];
    let g = grad(&probs.index_select(1, &[i])?.sum()?, xl, create_graph)?;
    Ok(g.reshape(&[b, xl.numel() / b])?)
}

/// `max(p, ε)` with zero gradient where clamped, and the number of clamped entries.
fn clamp_probs(p: &Tensor) -> Result<(Tensor, usize)> {
    let mut clamped = 0;
    let mask: Vec<f64> = p
        .data()
        .iter()
        .map(|&v| {
            if v >= PROB_EPS {
                1.0
            } else {
                clamped += 1;
                0.0
            }
        })
        .collect();
    let fill: Vec<f64> = mask.iter().map(|m| (1.0 - m) * PROB_EPS).collect();
    let mask = Tensor::new(mask, p.shape())?;
    let fill = Tensor::new(fill, p.shape())?;
    Ok((p.mul(&mask)?.add(&fill)?, clamped))
}

/// Both parts of the cross-entropy distillation loss with a Jacobian term.
#[derive(Debug, Clone)]
pub struct CeDistill {
    /// `soft_ce + jacobian`.
    pub total: Tensor,
    /// `-mean_b Σᵢ tᵢ log sᵢ` on temperature-softened outputs.
    pub soft_ce: Tensor,
    /// `-σ² mean_b Σᵢ (∇ₓtᵢ · ∇ₓsᵢ) / sᵢ`.
    pub jacobian: Tensor,
    /// Student probabilities raised to [`PROB_EPS`] in the denominator.
    pub clamped: usize,
}

pub fn distill_ce_with_jacobian(
    teacher: &dyn Model,
    student: &dyn Model,
    x: &Tensor,
    tape: &Tape,
    sigma: f64,
    temperature: f64,
) -> Result<CeDistill> {
    let (xl, t, s) = run_both(teacher, student, x, tape)?;
    check_same("matched logits", &t.logits, &s.logits)?;
    let b = x.shape()[0];
    let k = t.logits.numel() / b;
    let soft_ce = finite("soft-ce", soft_cross_entropy(&t.logits, &s.logits, temperature)?)?;
    let tp = t.logits.softmax(temperature)?;
    let sp = s.logits.softmax(temperature)?;
    let (sc, clamped) = clamp_probs(&sp)?;
    let mut acc: Option<Tensor> = None;
    if sigma != 0.0 {
        for i in 0..k {
            let gt = prob_grad(&tp, i, &xl, false)?;
            let gs = prob_grad(&sp, i, &xl, true)?;
            let dot = gs.mul(&gt)?.sum_last()?;
            let term = dot.div(&sc.index_select(1, &[i])?.reshape(&[b])?)?.sum()?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
    }
    let jacobian = match acc {
        Some(a) => finite("ce-jacobian", a.scale(-sigma * sigma / b as f64)?)?,
        None => Tensor::scalar(0.0),
    };
    Ok(CeDistill {
        total: soft_ce.add(&jacobian)?,
        soft_ce,
        jacobian,
        clamped,
    })
}

/// A Jacobian-norm penalty and the number of clamped probabilities.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub value: Tensor,
    pub clamped: usize,
}

/// Squared-error family: `σ² Σᵢ ‖∇ₓsᵢ‖²`; `targets` is ignored.
/// Cross-entropy family: `σ² Σᵢ yᵢ ‖∇ₓpᵢ‖² / pᵢ²` with `p = softmax(s/T)`
/// and `y` the `(B, k)` targets. Both are averaged over the batch.
pub fn jacobian_norm_penalty(
    student: &dyn Model,
    x: &Tensor,
    tape: &Tape,
    targets: Option<&Tensor>,
    family: Family,
    sigma: f64,
    temperature: f64,
) -> Result<Penalty> {
    let xl = tape.leaf(&x.detach());
    let s = student.logits(&xl)?;
    let b = x.shape()[0];
    let k = s.numel() / b;
    let scale = sigma * sigma / b as f64;
    match family {
        Family::SquaredError => {
            let mut acc: Option<Tensor> = None;
            for i in 0..k {
                let g = grad(&s.index_select(1, &[i])?.sum()?, &xl, true)?;
                let term = g.square()?.sum()?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            Ok(Penalty {
                value: acc.expect("k >= 1").scale(scale)?,
                clamped: 0,
            })
        }
        Family::CrossEntropy => {
            let y = targets.ok_or_else(|| {
                Error::InvalidArgument("cross-entropy penalty requires targets".into())
            })?;
            check_same("penalty targets", &s, y)?;
            let p = s.softmax(temperature)?;
            let (pc, clamped) = clamp_probs(&p)?;
            let mut acc = Tensor::scalar(0.0);
            for i in 0..k {
                let yi = y.index_select(1, &[i])?.reshape(&[b])?.detach();
                if yi.data().iter().all(|&v| v == 0.0) {
                    continue;
                }
                let g = prob_grad(&p, i, &xl, true)?;
                let norms = g.square()?.sum_last()?;
                let denom = pc.index_select(1, &[i])?.reshape(&[b])?.square()?;
                acc = acc.add(&norms.mul(&yi)?.div(&denom)?.sum()?)?;
            }
            Ok(Penalty {
                value: finite("jac-norm", acc.scale(scale)?)?,
                clamped,
            })
        }
    }
}

/// Channelwise sum of squares: `(C, H, W) -> (H, W)` or `(B, C, H, W) -> (B, H, W)`.
pub fn attention_map(feature: &Tensor) -> Result<Tensor> {
    match feature.ndim() {
        3 | 4 => Ok(feature.square()?.sum_axis(feature.ndim() - 3)?),
        _ => Err(Error::InvalidArgument(format!(
            "attention needs a (B,) C, H, W feature, got {:?}",
            feature.shape()
        ))),
    }
}

/// Splits `(H, W)` or `(B, H, W)` maps into per-example flat rows `(B, H*W)`.
fn rows(map: &Tensor) -> Result<(usize, Tensor)> {
    let (b, n) = match map.ndim() {
        2 => (1, map.numel()),
        3 => (map.shape()[0], map.numel() / map.shape()[0]),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "attention map must be (B,) H, W, got {:?}",
                map.shape()
            )))
        }
    };
    Ok((b, map.reshape(&[b, n])?))
}

fn unit(v: &Tensor) -> Result<Tensor> {
    let n = v.square()?.sum()?.sqrt()?;
    Ok(v.div(&n.broadcast_to(v.shape(), &[])?)?)
}

fn norm_of(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Distance between the unit-normalized rows `a` and `b` of two `(B, n)`
/// tensors, or `None` if either row has zero norm.
fn unit_distance_sq(a: &Tensor, b: &Tensor, row: usize) -> Result<Option<Tensor>> {
    let n = a.shape()[1];
    let ar = a.index_select(0, &[row])?.reshape(&[n])?;
    let br = b.index_select(0, &[row])?.reshape(&[n])?;
    if norm_of(ar.data()) == 0.0 || norm_of(br.data()) == 0.0 {
        return Ok(None);
    }
    Ok(Some(unit(&br)?.sub(&unit(&ar)?)?.square()?.sum()?))
}

/// `‖a_t/‖a_t‖ - a_s/‖a_s‖‖₂` (not squared), averaged over the batch, and
/// the number of examples skipped because a map had zero norm.
pub fn match_attention(a_t: &Tensor, a_s: &Tensor) -> Result<(Tensor, usize)> {
    check_same("attention maps", a_t, a_s)?;
    let (b, t) = rows(a_t)?;
    let (_, s) = rows(a_s)?;
    let mut degenerate = 0;
    let mut acc = Tensor::scalar(0.0);
    for r in 0..b {
        match unit_distance_sq(&t, &s, r)? {
            None => degenerate += 1,
            // sqrt has no derivative at 0; an exact match contributes a constant 0
            Some(d) if d.item() == 0.0 => {}
            Some(d) => acc = acc.add(&d.sqrt()?)?,
        }
    }
    Ok((acc.scale(1.0 / b as f64)?, degenerate))
}

/// Peak of each pooled map `(B, H, W)`, lowest row-major index on ties.
fn peaks(pooled: &Tensor) -> Vec<usize> {
    let b = pooled.shape()[0];
    pooled.data().chunks(pooled.numel() / b).map(argmax).collect()
}

/// Normalized attention-Jacobian matching at one tap pair: pool the teacher
/// attention map (stride 1), take its peak per example, and compare the unit
/// input gradients of teacher and student pooled attention at that pixel.
/// Returns `‖ĝ_t - ĝ_s‖²` averaged over the batch, the number of examples
/// skipped for a zero gradient, and the peak indices.
pub fn match_attention_jacobians(
    teacher: &dyn Model,
    student: &dyn Model,
    x: &Tensor,
    tape: &Tape,
    taps: (usize, usize),
    pool_window: usize,
) -> Result<(Tensor, usize, Vec<usize>)> {
    let (xl, t, s) = run_both(teacher, student, x, tape)?;
    let ft = t
        .taps
        .get(taps.0)
        .ok_or_else(|| Error::InvalidArgument(format!("teacher has no tap {}", taps.0)))?;
    let fs = s
        .taps
        .get(taps.1)
        .ok_or_else(|| Error::InvalidArgument(format!("student has no tap {}", taps.1)))?;
    let at = attention_map(ft)?;
    let as_ = attention_map(fs)?;
    if at.shape() != as_.shape() {
        return Err(Error::Shape {
            what: format!("attention maps at taps {taps:?} (teacher {:?}, student {:?})", ft.shape(), fs.shape()),
            expected: at.shape().to_vec(),
            got: as_.shape().to_vec(),
        });
    }
    let b = x.shape()[0];
    let pt = at.avg_pool2d(pool_window, 1)?;
    let ps = as_.avg_pool2d(pool_window, 1)?;
    let idx = peaks(&pt);
    let cells = pt.numel() / b;
    let gt = grad(&pt.reshape(&[b, cells])?.select_per_row(&idx)?.sum()?, &xl, false)?;
    let gs = grad(&ps.reshape(&[b, cells])?.select_per_row(&idx)?.sum()?, &xl, true)?;
    let d = xl.numel() / b;
    let gt = gt.reshape(&[b, d])?;
    let gs = gs.reshape(&[b, d])?;
    let mut degenerate = 0;
    let mut acc = Tensor::scalar(0.0);
    for r in 0..b {
        match unit_distance_sq(&gt, &gs, r)? {
            None => degenerate += 1,
            Some(v) => acc = acc.add(&v)?,
        }
    }
    Ok((acc.scale(1.0 / b as f64)?, degenerate, idx))
}

/// Weights and settings of the composite training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    /// Ground-truth cross-entropy.
    pub alpha: f64,
    /// Activation matching.
    pub beta: f64,
    /// Jacobian matching.
    pub gamma: f64,
    /// Attention-map matching at `tap_pairs`.
    pub attention: f64,
    /// Jacobian-norm penalty.
    pub jac_norm: f64,
    /// Input noise scale in units of input standard deviations.
    pub sigma: f64,
    pub family: Family,
    pub temperature: f64,
    pub jac_strategy: JacobianStrategy,
    /// `(teacher tap, student tap)` indices into each network's feature taps.
    pub tap_pairs: Vec<(usize, usize)>,
    /// Student head trained on labels.
    pub ce_head: Head,
    /// Student head matched to the teacher.
    pub match_head: Head,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            attention: 0.0,
            jac_norm: 0.0,
            sigma: 1.0,
            family: Family::SquaredError,
            temperature: 1.0,
            jac_strategy: JacobianStrategy::default(),
            tap_pairs: Vec::new(),
            ce_head: Head::Source,
            match_head: Head::Source,
        }
    }
}

impl LossSpec {
    /// Cross-entropy only.
    pub fn ce_only() -> Self {
        LossSpec {
            beta: 0.0,
            gamma: 0.0,
            ..LossSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("attention", self.attention),
            ("jac_norm", self.jac_norm),
            ("sigma", self.sigma),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        let needs_taps = self.attention > 0.0 || (self.gamma > 0.0 && self.jac_strategy.mode == JacobianMode::MaxAttentionPixel);
        if needs_taps && self.tap_pairs.is_empty() {
            return Err(Error::InvalidArgument("attention terms need at least one tap pair".into()));
        }
        if self.jac_strategy.pool_window.is_some() && self.jac_strategy.mode != JacobianMode::MaxAttentionPixel {
            return Err(Error::InvalidArgument(
                "pool_window only applies to the max-attention-pixel strategy".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0 || self.attention > 0.0
    }
}

/// One logged loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub name: String,
    pub weight: f64,
    pub raw: f64,
    pub weighted: f64,
    /// Examples skipped for zero-norm normalization.
    pub degenerate: usize,
    /// Probabilities clamped to [`PROB_EPS`].
    pub clamped: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub terms: Vec<TermValue>,
}

impl CompositeLoss {
    pub fn term(&self, name: &str) -> Option<&TermValue> {
        self.terms.iter().find(|t| t.name == name)
    }
}

struct Acc {
    total: Option<Tensor>,
    terms: Vec<TermValue>,
}

impl Acc {
    fn push(&mut self, name: &str, weight: f64, raw: Tensor, degenerate: usize, clamped: usize, warning: Option<String>) -> Result<()> {
        let raw = finite(name, raw)?;
        let weighted = raw.scale(weight)?;
        self.terms.push(TermValue {
            name: name.into(),
            weight,
            raw: raw.item(),
            weighted: weighted.item(),
            degenerate,
            clamped,
            warning,
        });
        self.total = Some(match self.total.take() {
            Some(t) => t.add(&weighted)?,
            None => weighted,
        });
        Ok(())
    }
}

/// Weighted sum of the configured terms on one batch. Terms with zero weight
/// are skipped. `student_params` should be leaves on `tape`.
///
/// Term names: `ce`, `act`, `jac`, `att`, `jac-norm`.
pub fn composite_loss(
    spec: &LossSpec,
    x: &Tensor,
    labels: &[usize],
    tape: &Tape,
    teacher: Option<&Network>,
    student: &Network,
    student_params: &[Tensor],
) -> Result<CompositeLoss> {
    spec.validate()?;
    let mut acc = Acc {
        total: None,
        terms: Vec::new(),
    };
    let teacher_net = |term: &str| -> Result<&Network> {
        teacher.ok_or_else(|| Error::Term {
            term: term.into(),
            msg: "a teacher network is required".into(),
        })
    };
    let x = x.detach();
    let pass = if spec.alpha > 0.0 || spec.beta > 0.0 || spec.attention > 0.0 {
        Some(student.forward_with(student_params, &x)?)
    } else {
        None
    };
    let teacher_pass = if spec.beta > 0.0 || spec.attention > 0.0 {
        let t = teacher_net(if spec.beta > 0.0 { "act" } else { "att" })?;
        Some(t.forward_with(&t.param_tensors(), &x)?)
    } else {
        None
    };

    if spec.alpha > 0.0 {
        let logits = pass.as_ref().expect("student pass").head(spec.ce_head)?;
        let v = cross_entropy(logits, labels).map_err(|e| e.in_term("ce"))?;
        acc.push("ce", spec.alpha, v, 0, 0, None)?;
    }
    if spec.beta > 0.0 {
        let s = pass.as_ref().expect("student pass").head(spec.match_head)?;
        let t = teacher_pass.as_ref().expect("teacher pass").head(Head::Source)?;
        let v = match spec.family {
            Family::SquaredError => match_activations_sq(t, s),
            Family::CrossEntropy => soft_cross_entropy(t, s, spec.temperature),
        }
        .map_err(|e| e.in_term("act"))?;
        acc.push("act", spec.beta, v, 0, 0, None)?;
    }
    if spec.gamma > 0.0 {
        let t_net = teacher_net("jac")?;
        let warning = (spec.sigma == 0.0).then(|| "sigma is 0; the Jacobian term vanishes".to_string());
        if spec.jac_strategy.mode == JacobianMode::MaxAttentionPixel {
            let tm = NetModel::frozen(t_net, Head::Source);
            let sm = NetModel::new(student, student_params.to_vec(), spec.match_head);
            let mut sum = Tensor::scalar(0.0);
            let mut degenerate = 0;
            for &(ti, si) in &spec.tap_pairs {
                let side = tap_side(t_net, ti).map_err(|e| e.in_term("jac"))?;
                let w = spec.jac_strategy.window(side).map_err(|e| e.in_term("jac"))?;
                let (v, d, _) =
                    match_attention_jacobians(&tm, &sm, &x, tape, (ti, si), w).map_err(|e| e.in_term("jac"))?;
                sum = sum.add(&v)?;
                degenerate += d;
            }
            acc.push("jac", spec.gamma, sum, degenerate, 0, warning)?;
        } else {
            let tm = NetModel::frozen(t_net, Head::Source);
            let sm = NetModel::new(student, student_params.to_vec(), spec.match_head);
            match spec.family {
                Family::SquaredError => {
                    let v = match_jacobians_sq(&tm, &sm, &x, tape, &spec.jac_strategy, Some(labels), spec.sigma)
                        .map_err(|e| e.in_term("jac"))?;
                    acc.push("jac", spec.gamma, v, 0, 0, warning)?;
                }
                Family::CrossEntropy => {
                    if spec.jac_strategy.mode != JacobianMode::Full {
                        return Err(Error::Term {
                            term: "jac".into(),
                            msg: "the cross-entropy family uses every output".into(),
                        });
                    }
                    let d = distill_ce_with_jacobian(&tm, &sm, &x, tape, spec.sigma, spec.temperature)
                        .map_err(|e| e.in_term("jac"))?;
                    acc.push("jac", spec.gamma, d.jacobian, 0, d.clamped, warning)?;
                }
            }
        }
    }
    if spec.attention > 0.0 {
        let sp = pass.as_ref().expect("student pass");
        let tp = teacher_pass.as_ref().expect("teacher pass");
        let mut sum = Tensor::scalar(0.0);
        let mut degenerate = 0;
        for &(ti, si) in &spec.tap_pairs {
            let ft = tp.taps.get(ti).ok_or_else(|| Error::Term {
                term: "att".into(),
                msg: format!("teacher has no tap {ti}"),
            })?;
            let fs = sp.taps.get(si).ok_or_else(|| Error::Term {
                term: "att".into(),
                msg: format!("student has no tap {si}"),
            })?;
            let (v, d) = match_attention(&attention_map(ft)?, &attention_map(fs)?).map_err(|e| e.in_term("att"))?;
            sum = sum.add(&v)?;
            degenerate += d;
        }
        acc.push("att", spec.attention, sum, degenerate, 0, None)?;
    }
    if spec.jac_norm > 0.0 {
        let sm = NetModel::new(student, student_params.to_vec(), spec.ce_head);
        let k = student.outputs(spec.ce_head)?;
        let targets = one_hot(labels, k)?;
        let p = jacobian_norm_penalty(&sm, &x, tape, Some(&targets), spec.family, spec.sigma, spec.temperature)
            .map_err(|e| e.in_term("jac-norm"))?;
        acc.push("jac-norm", spec.jac_norm, p.value, 0, p.clamped, None)?;
    }
    let total = acc.total.ok_or_else(|| Error::InvalidArgument("every loss weight is zero".into()))?;
    Ok(CompositeLoss { total, terms: acc.terms })
}

/// Side length of the attention map at feature tap `tap`.
pub fn tap_side(net: &Network, tap: usize) -> Result<usize> {
    let pos = *net
        .feature_taps()
        .get(tap)
        .ok_or_else(|| Error::InvalidArgument(format!("network has no tap {tap}")))?;
    let shape = net.trunk_shape(pos).expect("tap is a trunk position");
    Ok(shape[1].min(shape[2]))
}
