//! Losses for the three training stages.
//!
//! All batch losses are means over the batch of per-sample terms. KL terms use
//! an additive floor of [`KL_FLOOR`] inside both logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const KL_FLOOR: f32 = 1e-9;

/// A batch of temperature-softened probability rows held in a graph.
#[derive(Debug, Clone, Copy)]
pub struct SoftDist {
    pub probs: NodeId,
    pub temperature: f32,
}

impl SoftDist {
    pub fn from_logits(g: &mut Graph, logits: NodeId, temperature: f32) -> Result<Self> {
        Ok(Self {
            probs: g.softmax(logits, temperature)?,
            temperature,
        })
    }

    /// Wrap precomputed probabilities as a constant.
    pub fn constant(g: &mut Graph, probs: Tensor, temperature: f32) -> Result<Self> {
        check_rows_normalized(&probs)?;
        Ok(Self {
            probs: g.input(probs),
            temperature,
        })
    }

    pub fn detached(&self, g: &mut Graph) -> Self {
        Self {
            probs: g.detach(self.probs),
            temperature: self.temperature,
        }
    }
}

fn check_rows_normalized(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let s: f32 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "row {r} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `logits` (temperature 1) against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let classes = g.value(logits).cols();
    let rows = g.value(logits).rows();
    if labels.len() != rows {
        return Err(Error::dim(format!(
            "{} labels for {rows} rows of logits",
            labels.len()
        )));
    }
    if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Data(format!(
            "label {y} of sample {i} is outside [0, {classes})"
        )));
    }
    let logp = g.log_softmax(logits, 1.0)?;
    let picked = g.pick(logp, labels)?;
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

/// Per-sample `Σ p·(ln(p+ε) − ln(q+ε))`, shape `[batch]`.
pub fn kl_rows(g: &mut Graph, p: SoftDist, q: SoftDist) -> Result<NodeId> {
    if g.shape(p.probs) != g.shape(q.probs) {
        return Err(Error::dim(format!(
            "KL between {:?} and {:?}",
            g.shape(p.probs),
            g.shape(q.probs)
        )));
    }
    if p.temperature != q.temperature {
        return Err(Error::config(format!(
            "KL between distributions softened at {} and {}",
            p.temperature, q.temperature
        )));
    }
    let lp = g.ln_eps(p.probs, KL_FLOOR);
    let lq = g.ln_eps(q.probs, KL_FLOOR);
    let d = g.sub(lp, lq)?;
    let w = g.mul(p.probs, d)?;
    Ok(g.sum_last(w))
}

/// `KL(p ‖ q)` averaged over the batch.
pub fn kl_divergence(g: &mut Graph, p: SoftDist, q: SoftDist) -> Result<NodeId> {
    let rows = kl_rows(g, p, q)?;
    Ok(g.mean_all(rows))
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Loss {
    pub total: NodeId,
    pub task: NodeId,
    pub align: Option<NodeId>,
    pub kl_terms: usize,
}

/// Joint task + bidirectional alignment loss over all members.
///
/// `logits_all[i]` are the logits of member `i` on the same batch. With
/// `detach_align` the first argument of every KL is a constant.
pub fn stage1_loss(
    g: &mut Graph,
    logits_all: &[NodeId],
    labels: &[usize],
    temperature: f32,
    detach_align: bool,
) -> Result<Stage1Loss> {
    if logits_all.len() < 2 {
        return Err(Error::config(format!(
            "joint initialization needs at least 2 models, got {}",
            logits_all.len()
        )));
    }
    let mut task = cross_entropy(g, logits_all[0], labels)?;
    for &z in &logits_all[1..] {
        let ce = cross_entropy(g, z, labels)?;
        task = g.add(task, ce)?;
    }
    let dists = logits_all
        .iter()
        .map(|&z| SoftDist::from_logits(g, z, temperature))
        .collect::<Result<Vec<_>>>()?;

    let mut align: Option<NodeId> = None;
    let mut kl_terms = 0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            for (a, b) in [(dists[i], dists[j]), (dists[j], dists[i])] {
                let reference = if detach_align { a.detached(g) } else { a };
                let kl = kl_divergence(g, reference, b)?;
                align = Some(match align {
                    Some(acc) => g.add(acc, kl)?,
                    None => kl,
                });
                kl_terms += 1;
            }
        }
    }
    let align = align.expect("at least one pair");
    let total = g.add(task, align)?;
    Ok(Stage1Loss {
        total,
        task,
        align: Some(align),
        kl_terms,
    })
}

/// `KL(student ‖ teacher)` with the student side held constant.
pub fn stage2_loss(g: &mut Graph, student: SoftDist, teacher: SoftDist) -> Result<NodeId> {
    let student = student.detached(g);
    kl_divergence(g, student, teacher)
}

/// `Σ_k mean_b w_{b,k}·KL(teacher_k ‖ student)`; teachers are constants.
///
/// `selected[k]` holds, for each sample, the distribution of its k-th chosen
/// teacher. `weights[k]`, when given, is a `[batch]` node of per-sample
/// weights for that slot.
pub fn dkd_loss(
    g: &mut Graph,
    selected: &[SoftDist],
    student: SoftDist,
    weights: Option<&[NodeId]>,
) -> Result<NodeId> {
    if selected.is_empty() {
        return Err(Error::config("distillation needs at least one selected teacher"));
    }
    if let Some(w) = weights {
        if w.len() != selected.len() {
            return Err(Error::dim(format!(
                "{} weight vectors for {} selected teachers",
                w.len(),
                selected.len()
            )));
        }
    }
    let mut total: Option<NodeId> = None;
    for (k, t) in selected.iter().enumerate() {
        let t = t.detached(g);
        let rows = kl_rows(g, t, student)?;
        let rows = match weights {
            Some(w) => g.mul(rows, w[k])?,
            None => rows,
        };
        let term = g.mean_all(rows);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty selection"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LbVariant {
    /// `KL(U ‖ C̄)` against the uniform routing distribution.
    Kl,
    /// Squared coefficient of variation of `C̄` (population std).
    Cv,
}

fn check_normalized(mean_conf: &[f32]) -> Result<()> {
    let s: f32 = mean_conf.iter().sum();
    if (s - 1.0).abs() > 1e-4 {
        return Err(Error::Invariant(format!(
            "mean routing confidence sums to {s}, expected 1"
        )));
    }
    Ok(())
}

/// Load-balancing loss on the batch-mean confidence `[N]`.
pub fn lb_loss(g: &mut Graph, mean_conf: NodeId, variant: LbVariant) -> Result<NodeId> {
    let c = g.value(mean_conf);
    if c.rank() != 1 {
        return Err(Error::dim(format!(
            "mean confidence must be a vector, got {:?}",
            c.shape()
        )));
    }
    check_normalized(c.data())?;
    let n = c.len();
    match variant {
        LbVariant::Kl => {
            let u = 1.0 / n as f32;
            let uniform = g.input(Tensor::filled(&[n], u));
            let ln_u = g.input(Tensor::filled(&[n], (u + KL_FLOOR).ln()));
            let ln_c = g.ln_eps(mean_conf, KL_FLOOR);
            let d = g.sub(ln_u, ln_c)?;
            let w = g.mul(uniform, d)?;
            Ok(g.sum_all(w))
        }
        LbVariant::Cv => {
            let mean = g.mean_all(mean_conf);
            let centered = g.sub(mean_conf, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean_all(sq);
            let mean_sq = g.mul(mean, mean)?;
            g.div_scalar(var, mean_sq)
        }
    }
}

/// Plain-value version of [`lb_loss`].
pub fn lb_loss_value(mean_conf: &[f32], variant: LbVariant) -> Result<f32> {
    let mut g = Graph::new();
    let c = g.input(Tensor::new(vec![mean_conf.len()], mean_conf.to_vec())?);
    let l = lb_loss(&mut g, c, variant)?;
    Ok(g.value(l).data()[0])
}

/// `ce + λ1·dkd + λ2·lb` where `ce` and `dkd` are already batch means.
pub fn stage3_loss(
    g: &mut Graph,
    ce: NodeId,
    dkd: Option<NodeId>,
    lb: Option<NodeId>,
    lambda1: f32,
    lambda2: f32,
) -> Result<NodeId> {
    let mut total = ce;
    if let Some(d) = dkd {
        let d = g.scale(d, lambda1);
        total = g.add(total, d)?;
    }
    if let Some(l) = lb {
        let l = g.scale(l, lambda2);
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Plain-value version of [`stage3_loss`].
pub fn stage3_loss_value(ce: f64, dkd: f64, lb: f64, lambda1: f64, lambda2: f64) -> f64 {
    ce + lambda1 * dkd + lambda2 * lb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn scalar(g: &Graph, n: NodeId) -> f32 {
        g.value(n).data()[0]
    }

    fn dist(g: &mut Graph, rows: &[&[f32]]) -> SoftDist {
        SoftDist::constant(g, Tensor::from_rows(rows), 1.0).unwrap()
    }

    #[test]
    fn ce_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 10]));
        let l = cross_entropy(&mut g, z, &[3, 7]).unwrap();
        assert!((scalar(&g, l) - 10f32.ln()).abs() < 1e-6);

        let mut row = [0.0f32; 4];
        row[2] = 20.0;
        let z = g.input(Tensor::from_rows(&[&row]));
        let l = cross_entropy(&mut g, z, &[2]).unwrap();
        assert!(scalar(&g, l) < 1e-8);

        // -ln(e / (e + 1))
        let z = g.input(Tensor::from_rows(&[&[1.0, 0.0]]));
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        assert!((scalar(&g, l) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn ce_label_out_of_range_names_sample() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[3, 4]));
        let err = cross_entropy(&mut g, z, &[0, 1, 4]).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("sample 2")), "{err}");
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = dist(&mut g, &[&[0.2, 0.3, 0.5]]);
        let l = kl_divergence(&mut g, p, p).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let p = dist(&mut g, &[&[1.0, 0.0]]);
        let q = dist(&mut g, &[&[0.5, 0.5]]);
        let l = kl_divergence(&mut g, p, q).unwrap();
        assert!((scalar(&g, l) - std::f32::consts::LN_2).abs() < 1e-6);

        let q3 = dist(&mut g, &[&[0.5, 0.25, 0.25]]);
        assert!(matches!(kl_divergence(&mut g, p, q3), Err(Error::Dimension(_))));
    }

    #[test]
    fn stage1_identical_members_have_zero_alignment() {
        let mut g = Graph::new();
        let zt = Tensor::uniform(&[4, 3], 2.0, &mut stream(0, "z"));
        let zs: Vec<_> = (0..3).map(|_| g.input(zt.clone())).collect();
        let labels = [0, 1, 2, 0];
        let out = stage1_loss(&mut g, &zs, &labels, 2.0, false).unwrap();
        assert_eq!(scalar(&g, out.align.unwrap()), 0.0);
        assert_eq!(scalar(&g, out.total), scalar(&g, out.task));
    }

    #[test]
    fn stage1_kl_term_counts() {
        for (members, expected) in [(2usize, 2usize), (3, 6), (4, 12)] {
            let mut g = Graph::new();
            let zs: Vec<_> = (0..members)
                .map(|i| g.input(Tensor::uniform(&[2, 3], 1.0, &mut stream(i as u64, "z"))))
                .collect();
            let out = stage1_loss(&mut g, &zs, &[0, 1], 2.0, false).unwrap();
            // brute-force count of ordered pairs (i, j), i != j
            let brute = (0..members)
                .flat_map(|i| (0..members).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .count();
            assert_eq!(out.kl_terms, brute);
            assert_eq!(out.kl_terms, expected);
        }
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(stage1_loss(&mut g, &[z], &[0], 2.0, false), Err(Error::Config(_))));
    }

    #[test]
    fn stage1_alignment_symmetric_under_reordering() {
        let ts: Vec<Tensor> = (0..3)
            .map(|i| Tensor::uniform(&[5, 4], 2.0, &mut stream(i, "z")))
            .collect();
        let labels = [0, 1, 2, 3, 0];
        let eval = |order: &[usize]| {
            let mut g = Graph::new();
            let zs: Vec<_> = order.iter().map(|&i| g.input(ts[i].clone())).collect();
            let out = stage1_loss(&mut g, &zs, &labels, 2.0, false).unwrap();
            scalar(&g, out.align.unwrap())
        };
        let a = eval(&[0, 1, 2]);
        let b = eval(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
    }

    #[test]
    fn stage1_detach_blocks_reference_gradients() {
        // With detachment each member still receives gradient (as the second
        // argument), but the value matches the undetached loss.
        let ts: Vec<Tensor> = (0..2)
            .map(|i| Tensor::uniform(&[3, 4], 2.0, &mut stream(i, "z")))
            .collect();
        let run = |detach: bool| {
            let mut g = Graph::new();
            let zs: Vec<_> = ts.iter().map(|t| g.variable(t.clone())).collect();
            let out = stage1_loss(&mut g, &zs, &[0, 1, 2], 2.0, detach).unwrap();
            let v = scalar(&g, out.total);
            g.backward(out.total).unwrap();
            (v, g.grad(zs[0]).unwrap().to_vec())
        };
        let (v1, g1) = run(false);
        let (v2, g2) = run(true);
        assert_eq!(v1, v2);
        assert_ne!(g1, g2);
    }

    #[test]
    fn stage2_student_side_is_constant() {
        let mut g = Graph::new();
        let zs = g.variable(Tensor::uniform(&[3, 4], 1.0, &mut stream(0, "s")));
        let zt = g.variable(Tensor::uniform(&[3, 4], 1.0, &mut stream(1, "t")));
        let s = SoftDist::from_logits(&mut g, zs, 2.0).unwrap();
        let t = SoftDist::from_logits(&mut g, zt, 2.0).unwrap();
        let l = stage2_loss(&mut g, s, t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(zs).is_none());
        assert!(g.grad(zt).unwrap().iter().any(|v| *v != 0.0));

        let mut g = Graph::new();
        let z = g.input(Tensor::uniform(&[3, 4], 1.0, &mut stream(0, "s")));
        let s = SoftDist::from_logits(&mut g, z, 2.0).unwrap();
        let l = stage2_loss(&mut g, s, s).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn dkd_examples() {
        let mut g = Graph::new();
        let zs = g.variable(Tensor::uniform(&[4, 3], 1.0, &mut stream(0, "s")));
        let zt = g.variable(Tensor::uniform(&[4, 3], 1.0, &mut stream(1, "t")));
        let s = SoftDist::from_logits(&mut g, zs, 2.0).unwrap();
        let t = SoftDist::from_logits(&mut g, zt, 2.0).unwrap();
        let one = dkd_loss(&mut g, &[t], s, None).unwrap();
        let two = dkd_loss(&mut g, &[t, t], s, None).unwrap();
        assert_eq!(scalar(&g, two), 2.0 * scalar(&g, one));
        let same = dkd_loss(&mut g, &[s], s, None).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
        assert!(matches!(dkd_loss(&mut g, &[], s, None), Err(Error::Config(_))));

        g.backward(one).unwrap();
        assert!(g.grad(zt).is_none());
        assert!(g.grad(zs).is_some());
    }

    #[test]
    fn lb_examples() {
        let u = [0.25f32; 4];
        assert_eq!(lb_loss_value(&u, LbVariant::Kl).unwrap(), 0.0);
        assert_eq!(lb_loss_value(&u, LbVariant::Cv).unwrap(), 0.0);
        let kl = lb_loss_value(&[1.0, 0.0, 0.0, 0.0], LbVariant::Kl).unwrap();
        assert!(kl > 4.0, "{kl}");
        let cv = lb_loss_value(&[0.5, 0.5, 0.0, 0.0], LbVariant::Cv).unwrap();
        assert!((cv - 1.0).abs() < 1e-6);
        assert!(matches!(
            lb_loss_value(&[0.5, 0.4], LbVariant::Kl),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn stage3_examples() {
        assert!((stage3_loss_value(1.0, 2.0, 3.0, 0.5, 0.1) - 2.3).abs() < 1e-12);
        let mut g = Graph::new();
        let ce = g.input(Tensor::scalar(1.0));
        let d = g.input(Tensor::scalar(2.0));
        let l = g.input(Tensor::scalar(3.0));
        let t = stage3_loss(&mut g, ce, Some(d), Some(l), 0.5, 0.1).unwrap();
        assert!((scalar(&g, t) - 2.3).abs() < 1e-6);
        let t = stage3_loss(&mut g, ce, Some(d), Some(l), 0.0, 0.0).unwrap();
        assert_eq!(scalar(&g, t), 1.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.01f32..1.0, n).prop_map(|v| {
            let s: f32 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in simplex(5), q in simplex(5)) {
            let mut g = Graph::new();
            let pd = SoftDist::constant(&mut g, Tensor::new(vec![1, 5], p).unwrap(), 1.0).unwrap();
            let qd = SoftDist::constant(&mut g, Tensor::new(vec![1, 5], q).unwrap(), 1.0).unwrap();
            let l = kl_divergence(&mut g, pd, qd).unwrap();
            prop_assert!(scalar(&g, l) >= -1e-6);
            let z = kl_divergence(&mut g, pd, pd).unwrap();
            prop_assert!(scalar(&g, z).abs() <= 1e-9);
        }

        #[test]
        fn lb_kl_minimum_at_uniform(n in 2usize..8, from in 0usize..8, to in 0usize..8) {
            let (from, to) = (from % n, to % n);
            prop_assume!(from != to);
            let mut c = vec![1.0 / n as f32; n];
            c[from] -= 0.01;
            c[to] += 0.01;
            let base = lb_loss_value(&vec![1.0 / n as f32; n], LbVariant::Kl).unwrap();
            prop_assert!(lb_loss_value(&c, LbVariant::Kl).unwrap() > base);
        }

        #[test]
        fn stage3_is_linear(ce in 0.0f64..5.0, dkd in 0.0f64..5.0, lb in 0.0f64..5.0,
                            l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, dx in 0.0f64..1.0) {
            let base = stage3_loss_value(ce, dkd, lb, l1, l2);
            prop_assert!((stage3_loss_value(ce + dx, dkd, lb, l1, l2) - base - dx).abs() < 1e-9);
            prop_assert!((stage3_loss_value(ce, dkd + dx, lb, l1, l2) - base - l1 * dx).abs() < 1e-9);
            prop_assert!((stage3_loss_value(ce, dkd, lb + dx, l1, l2) - base - l2 * dx).abs() < 1e-9);
        }
    }
}
