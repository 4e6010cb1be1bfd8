//! The loss zoo: cross-entropy, soft cross-entropy, temperature KL,
//! Jensen-Shannon, MSE, the cosine-similarity loss, and weighted pairs.
//!
//! Every loss is built as a subgraph on top of a logits node, so the same
//! code path serves training and the standalone `loss_*` functions. Targets
//! are preprocessed outside the graph (distribution rescaling, temperature
//! sharpening, L2 normalization) by [`prepare_inputs`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId, NORM_FLOOR};
use crate::labels::{normalize_rows, LabelMatrix, LabelRole};
use crate::tensor::Tensor;

/// Input name carrying one-hot hard labels.
pub const HARD_INPUT: &str = "hard";
/// Input name prefix carrying a preprocessed vector target.
pub const TARGET_INPUT: &str = "target";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Ce,
    SoftCe,
    Kl { temperature: f64 },
    Js,
    Mse,
    Cosine,
    Combo {
        a: Box<LossId>,
        b: Box<LossId>,
        w_a: f64,
        w_b: f64,
    },
}

/// Stable identifiers accepted by [`LossId::from_str`].
pub const LOSS_IDS: [&str; 9] = [
    "ce", "soft_ce", "kl", "js", "mse", "cosine", "kl+ce", "mse+ce", "soft_ce+ce",
];

impl LossId {
    pub fn kl() -> Self {
        LossId::Kl { temperature: 1.0 }
    }

    pub fn combo(a: LossId, b: LossId) -> Self {
        LossId::Combo {
            a: Box::new(a),
            b: Box::new(b),
            w_a: 1.0,
            w_b: 1.0,
        }
    }

    /// Sets the KL temperature on this loss and on any KL operand.
    pub fn with_temperature(self, t: f64) -> Self {
        match self {
            LossId::Kl { .. } => LossId::Kl { temperature: t },
            LossId::Combo { a, b, w_a, w_b } => LossId::Combo {
                a: Box::new(a.with_temperature(t)),
                b: Box::new(b.with_temperature(t)),
                w_a,
                w_b,
            },
            other => other,
        }
    }

    pub fn with_weights(self, wa: f64, wb: f64) -> Self {
        match self {
            LossId::Combo { a, b, .. } => LossId::Combo { a, b, w_a: wa, w_b: wb },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossId::Kl { temperature } if !(*temperature > 0.0) => Err(Error::invalid(format!(
                "KL temperature must be positive, got {temperature}"
            ))),
            LossId::Combo { a, b, w_a, w_b } => {
                if matches!(**a, LossId::Combo { .. }) || matches!(**b, LossId::Combo { .. }) {
                    return Err(Error::invalid("combo operands cannot be combos"));
                }
                if *w_a < 0.0 || *w_b < 0.0 || !(w_a + w_b > 0.0) {
                    return Err(Error::invalid(format!(
                        "combo weights must be non-negative with positive sum, got ({w_a}, {w_b})"
                    )));
                }
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    /// Needs one-hot hard labels.
    pub fn needs_hard(&self) -> bool {
        match self {
            LossId::Ce => true,
            LossId::Combo { a, b, .. } => a.needs_hard() || b.needs_hard(),
            _ => false,
        }
    }

    /// Needs a per-sample vector target (soft, smoothed, refined, logits).
    pub fn needs_target(&self) -> bool {
        match self {
            LossId::Ce => false,
            LossId::Combo { a, b, .. } => a.needs_target() || b.needs_target(),
            _ => true,
        }
    }

    /// Needs the vector target to be a probability distribution.
    pub fn needs_distribution(&self) -> bool {
        match self {
            LossId::SoftCe | LossId::Kl { .. } | LossId::Js => true,
            LossId::Combo { a, b, .. } => a.needs_distribution() || b.needs_distribution(),
            _ => false,
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossId::Ce => f.write_str("ce"),
            LossId::SoftCe => f.write_str("soft_ce"),
            LossId::Kl { .. } => f.write_str("kl"),
            LossId::Js => f.write_str("js"),
            LossId::Mse => f.write_str("mse"),
            LossId::Cosine => f.write_str("cosine"),
            LossId::Combo { a, b, .. } => write!(f, "{a}+{b}"),
        }
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let single = |s: &str| -> Result<LossId> {
            Ok(match s.trim() {
                "ce" => LossId::Ce,
                "soft_ce" => LossId::SoftCe,
                "kl" => LossId::kl(),
                "js" => LossId::Js,
                "mse" => LossId::Mse,
                "cosine" => LossId::Cosine,
                other => return Err(Error::Config(format!("unknown loss `{other}`"))),
            })
        };
        match s.split_once('+') {
            Some((a, b)) => {
                let id = LossId::combo(single(a)?, single(b)?);
                id.validate()?;
                Ok(id)
            }
            None => single(s),
        }
    }
}

/// Appends `loss` on top of `logits`. Inputs are named `hard` and
/// `target`, prefixed per combo operand.
pub fn build_loss(graph: &mut Graph, logits: NodeId, loss: &LossId) -> Result<NodeId> {
    loss.validate()?;
    Ok(build_inner(graph, logits, loss, ""))
}

fn build_inner(g: &mut Graph, z: NodeId, loss: &LossId, prefix: &str) -> NodeId {
    let target = |g: &mut Graph| g.input(&format!("{prefix}{TARGET_INPUT}"));
    match loss {
        LossId::Ce | LossId::SoftCe => {
            let y = if matches!(loss, LossId::Ce) {
                g.input(HARD_INPUT)
            } else {
                target(g)
            };
            let ls = g.log_softmax(z);
            let prod = g.mul(y, ls);
            let rows = g.sum_rows(prod);
            let m = g.mean(rows);
            g.scale(m, -1.0)
        }
        LossId::Kl { temperature } => {
            let t = *temperature;
            let p = target(g);
            let zt = g.scale(z, 1.0 / t);
            let ls = g.log_softmax(zt);
            let prod = g.mul(p, ls);
            let cross_rows = g.sum_rows(prod);
            let cross = g.mean(cross_rows);
            let plogp = g.xlogx(p);
            let ent_rows = g.sum_rows(plogp);
            let neg_ent = g.mean(ent_rows);
            let kl = g.sub(neg_ent, cross);
            g.scale(kl, t * t)
        }
        LossId::Js => {
            // JS = 1/2 sum p ln p + 1/2 sum q ln q - sum m ln m
            let p = target(g);
            let q = g.softmax(z);
            let lq = g.log_softmax(z);
            let qlq = g.mul(q, lq);
            let plp = g.xlogx(p);
            let pq = g.add(p, q);
            let m = g.scale(pq, 0.5);
            let mlm = g.xlogx(m);
            let half = g.add(plp, qlq);
            let half = g.scale(half, 0.5);
            let per = g.sub(half, mlm);
            let rows = g.sum_rows(per);
            g.mean(rows)
        }
        LossId::Mse => {
            let t = target(g);
            let d = g.sub(z, t);
            let sq = g.mul(d, d);
            g.mean(sq)
        }
        LossId::Cosine => {
            // target rows arrive L2-normalized
            let y = target(g);
            let dot = g.row_dot(z, y);
            let norm = g.row_norm(z);
            let cos = g.div(dot, norm);
            let m = g.mean(cos);
            let neg = g.scale(m, -1.0);
            g.add_scalar(neg, 1.0)
        }
        LossId::Combo { a, b, w_a, w_b } => {
            let la = build_inner(g, z, a, &format!("{prefix}a."));
            let lb = build_inner(g, z, b, &format!("{prefix}b."));
            let la = g.scale(la, *w_a);
            let lb = g.scale(lb, *w_b);
            g.add(la, lb)
        }
    }
}

fn check_nonnegative(target: &Tensor) -> Result<()> {
    for i in 0..target.rows() {
        if target.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("negative target entry in row {i}")));
        }
    }
    Ok(())
}

fn to_distribution(target: &Tensor) -> Result<Tensor> {
    check_nonnegative(target)?;
    let mut out = target.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::ZeroNormRow {
                what: "distribution target".into(),
                row: i,
            });
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// `softmax(ln p / T)` row-wise, computed as `p^(1/T)` renormalized so that
/// zero entries stay zero.
pub fn sharpen(p: &Tensor, t: f64) -> Result<Tensor> {
    let mut out = to_distribution(p)?;
    if t == 1.0 {
        return Ok(out);
    }
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(0.0, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v > 0.0 { ((*v).ln() - max.ln()) / t } else { f64::NEG_INFINITY };
            *v = v.exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// L2-normalized rows. Rows already at unit norm (to within a few ulps) are
/// passed through untouched, so normalizing twice is a no-op.
fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let mut out = normalize_rows(t, "cosine target")?;
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            out.row_mut(i).copy_from_slice(t.row(i));
        }
    }
    Ok(out)
}

/// Builds the named input tensors a loss graph expects from raw one-hot
/// labels and a raw vector target.
pub fn prepare_inputs(
    loss: &LossId,
    hard: Option<&Tensor>,
    target: Option<&Tensor>,
) -> Result<Vec<(String, Tensor)>> {
    loss.validate()?;
    let mut out = Vec::new();
    prepare_inner(loss, hard, target, "", &mut out)?;
    Ok(out)
}

fn prepare_inner(
    loss: &LossId,
    hard: Option<&Tensor>,
    target: Option<&Tensor>,
    prefix: &str,
    out: &mut Vec<(String, Tensor)>,
) -> Result<()> {
    let missing = |kind: &str| Error::invalid(format!("loss `{loss}` requires {kind}"));
    let name = format!("{prefix}{TARGET_INPUT}");
    match loss {
        LossId::Ce => {
            let h = hard.ok_or_else(|| missing("hard labels"))?;
            if !out.iter().any(|(n, _)| n == HARD_INPUT) {
                out.push((HARD_INPUT.to_string(), h.clone()));
            }
        }
        LossId::SoftCe | LossId::Js => {
            let t = target.ok_or_else(|| missing("a distribution target"))?;
            out.push((name, to_distribution(t)?));
        }
        LossId::Kl { temperature } => {
            let t = target.ok_or_else(|| missing("a distribution target"))?;
            out.push((name, sharpen(t, *temperature)?));
        }
        LossId::Mse => {
            let t = target.ok_or_else(|| missing("a vector target"))?;
            out.push((name, t.clone()));
        }
        LossId::Cosine => {
            let t = target.ok_or_else(|| missing("a vector target"))?;
            out.push((name, unit_rows(t)?));
        }
        LossId::Combo { a, b, .. } => {
            prepare_inner(a, hard, target, &format!("{prefix}a."), out)?;
            prepare_inner(b, hard, target, &format!("{prefix}b."), out)?;
        }
    }
    Ok(())
}

fn check_logits(logits: &Tensor, other: Option<&Tensor>) -> Result<()> {
    if logits.ndim() != 2 {
        return Err(Error::invalid(format!("logits must be [N, C], got {:?}", logits.shape())));
    }
    if let Some(o) = other {
        if o.shape() != logits.shape() {
            return Err(Error::invalid(format!(
                "logits {:?} and target {:?} differ in shape",
                logits.shape(),
                o.shape()
            )));
        }
    }
    Ok(())
}

/// Loss value and its gradient with respect to `logits`.
pub fn loss_with_grad(
    loss: &LossId,
    logits: &Tensor,
    hard: Option<&Tensor>,
    target: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    check_logits(logits, target)?;
    if let Some(h) = hard {
        check_logits(logits, Some(h))?;
    }
    let inputs = prepare_inputs(loss, hard, target)?;
    let mut g = Graph::new();
    let z = g.param("logits");
    let l = build_loss(&mut g, z, loss)?;
    g.output("loss", l);
    let mut b = Bindings::new().with("logits", logits);
    for (name, t) in &inputs {
        b.bind(name, t);
    }
    let mut eval = g.evaluate_with_grad(&b, "loss")?;
    let value = eval.scalar("loss")?;
    let grad = eval.param_grads.remove("logits").expect("logits is a parameter");
    Ok((value, grad))
}

fn value(loss: &LossId, logits: &Tensor, hard: Option<&Tensor>, target: Option<&Tensor>) -> Result<f64> {
    loss_with_grad(loss, logits, hard, target).map(|(v, _)| v)
}

/// Mean of `-ln softmax(logits)[true class]`.
pub fn loss_ce(logits: &Tensor, hard: &LabelMatrix) -> Result<f64> {
    if hard.role() != LabelRole::Hard {
        return Err(Error::LabelRole {
            expected: "hard".into(),
            found: hard.role().to_string(),
        });
    }
    value(&LossId::Ce, logits, Some(hard.values()), None)
}

/// Mean of `-sum_c target[c] ln softmax(logits)[c]`.
pub fn loss_soft_ce(logits: &Tensor, target: &Tensor) -> Result<f64> {
    check_nonnegative(target)?;
    value(&LossId::SoftCe, logits, None, Some(target))
}

/// Mean of `T^2 KL(sharpen(target, T) || softmax(logits / T))`.
pub fn loss_kl(logits: &Tensor, target: &Tensor, temperature: f64) -> Result<f64> {
    value(&LossId::Kl { temperature }, logits, None, Some(target))
}

/// Mean Jensen-Shannon divergence between `target` and `softmax(logits)`.
pub fn loss_js(logits: &Tensor, target: &Tensor) -> Result<f64> {
    value(&LossId::Js, logits, None, Some(target))
}

/// Mean squared difference over batch and classes.
pub fn loss_mse(logits: &Tensor, target_logits: &Tensor) -> Result<f64> {
    value(&LossId::Mse, logits, None, Some(target_logits))
}

/// Mean over the batch of `1 - cos(logits_i, target_i)`.
pub fn loss_cosine(logits: &Tensor, target: &Tensor) -> Result<f64> {
    check_logits(logits, Some(target))?;
    for i in 0..logits.rows() {
        if logits.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_FLOOR {
            return Err(Error::ZeroNormRow {
                what: "logits".into(),
                row: i,
            });
        }
    }
    value(&LossId::Cosine, logits, None, Some(target))
}

/// Weighted pair of losses, each operand routed to the label kind it needs.
pub fn loss_combo(
    id: &LossId,
    logits: &Tensor,
    hard: Option<&LabelMatrix>,
    vector_target: Option<&Tensor>,
) -> Result<f64> {
    if !matches!(id, LossId::Combo { .. }) {
        return Err(Error::invalid(format!("`{id}` is not a combo loss")));
    }
    value(id, logits, hard.map(LabelMatrix::values), vector_target)
}
